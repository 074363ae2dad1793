import math

import numpy as np
import pytest

from fusestyle.data import Corpus, RecordSet, default_domains, generate_dataset
from fusestyle.errors import ContractError, ValidationError
from fusestyle.layer import FuseStyleConfig, MixDecision
from fusestyle.model import ModelConfig, build_model
from fusestyle.tensor import Tensor
from fusestyle.train import (
    AdamState,
    ExperimentConfig,
    PlateauScheduler,
    Prediction,
    TrainingAborted,
    accuracy_from_predictions,
    adam_step,
    evaluate,
    run_experiment,
    scheduler_step,
    train,
)

SMALL = dict(block_channels=(4, 4, 4, 4), epochs=3, batch_size=8)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("train-corpus")
    generate_dataset(default_domains(3), 10, 11, out)
    return Corpus(out)


def adam_oracle(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


class TestAdam:
    def test_first_step(self):
        p = Tensor(np.array(0.0))
        adam_step([p], [np.array(1.0)], AdamState(lr=1e-4))
        assert float(p.data) == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-18)
        assert float(p.data) == pytest.approx(-9.99999e-5, rel=1e-6)

    def test_zero_grad_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0]))
        state = AdamState()
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state)
        assert p.data.tolist() == [1.0, -2.0]
        assert state.step == 5

    def test_ten_steps_on_square(self):
        p = Tensor(np.array(1.0))
        state = AdamState(lr=0.1)
        for _ in range(10):
            adam_step([p], [2.0 * p.data], state)
        assert abs(float(p.data) - adam_oracle(1.0, 0.1, 10)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step([Tensor(np.zeros(3))], [np.zeros(2)], AdamState())
        with pytest.raises(ContractError):
            adam_step([Tensor(np.zeros(3))], [], AdamState())


class TestScheduler:
    def trace(self, losses, **kw):
        s = PlateauScheduler(lr0=1e-4, **kw)
        return [scheduler_step(s, loss) for loss in losses]

    def test_monotone(self):
        assert self.trace([1.0, 0.9, 0.8]) == [1e-4] * 3

    def test_flat(self):
        lrs = self.trace([1.0, 1.0, 1.0, 1.0])
        assert lrs[:3] == [1e-4] * 3
        assert lrs[3] == pytest.approx(1e-6, rel=1e-12)

    def test_improve_at_boundary_resets(self):
        assert self.trace([1.0, 1.0, 1.0, 0.5, 0.5, 0.5]) == [1e-4] * 6

    def test_threshold(self):
        # gains smaller than 1e-6 do not count as improvement
        lrs = self.trace([1.0, 1.0 - 5e-7, 1.0 - 9e-7, 1.0 - 9.5e-7])
        assert lrs[-1] < 1e-4

    def test_k_reductions_exact(self):
        s = PlateauScheduler(lr0=1e-3, factor=0.1, patience=0)
        lrs = [s.step(1.0) for _ in range(4)]
        assert lrs[1:] == [1e-3 * 0.1 ** k for k in (1, 2, 3)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestEvaluate:
    def test_constant_one_predictor(self, corpus):
        model = build_model(ModelConfig(block_channels=(2, 2, 2, 2), mix_points=()))
        for t in model.params:
            t.data = np.zeros_like(t.data)
        model.params[-1].data = np.array([5.0])
        result = evaluate(model, {"D0": corpus.shard("D0", "test")})
        assert result.accuracy == {"D0": 50.0}

    def test_perfect_oracle(self):
        preds = [Prediction(f"s{i}", "D0", i % 2, 0.0, i % 2) for i in range(10)]
        assert accuracy_from_predictions(preds) == {"D0": 100.0}

    def test_recount(self, corpus):
        model = build_model(ModelConfig(block_channels=(4, 4, 4, 4), seed=3))
        result = evaluate(model, {d: corpus.shard(d, "test") for d in ("D0", "D1")})
        for d, acc in result.accuracy.items():
            rows = [p for p in result.predictions if p.domain == d]
            assert acc == 100.0 * sum(p.pred == p.label for p in rows) / len(rows)
            assert all(p.pred == int(p.logit >= 0) for p in rows)

    def test_does_not_mutate(self, corpus):
        model = build_model(ModelConfig(block_channels=(4, 4, 4, 4), fusestyle=FuseStyleConfig(p_apply=1.0)))
        before = model.get_flat().tobytes()
        evaluate(model, {"D1": corpus.shard("D1", "test")})
        assert model.get_flat().tobytes() == before

    def test_empty(self):
        model = build_model(ModelConfig(block_channels=(2, 2, 2, 2)))
        with pytest.raises(ValidationError):
            evaluate(model, {"D0": RecordSet.concat([])})


class TestTrain:
    def fit(self, corpus, p_apply=0.5, mix_points=(1, 4), seed=0, epochs=3):
        cfg = ModelConfig(block_channels=(4, 4, 4, 4), mix_points=mix_points, seed=seed, fusestyle=FuseStyleConfig(p_apply=p_apply))
        model = build_model(cfg)
        result = train(model, corpus.select(["D1", "D2"]), epochs, np.random.default_rng(seed + 2000),
                       batch_size=8, shuffle_seed=seed + 1000, optimizer=AdamState(lr=1e-3))
        return model, result

    def test_deterministic(self, corpus):
        a, ra = self.fit(corpus)
        b, rb = self.fit(corpus)
        assert a.get_flat().tobytes() == b.get_flat().tobytes()
        assert ra.loss_curve == rb.loss_curve and ra.decision_log == rb.decision_log

    def test_closed_gate_matches_plain(self, corpus):
        a, ra = self.fit(corpus, p_apply=0.0)
        b, rb = self.fit(corpus, mix_points=())
        assert ra.loss_curve == rb.loss_curve
        assert a.get_flat().tobytes() == b.get_flat().tobytes()

    def test_decision_log(self, corpus):
        _, r = self.fit(corpus, epochs=1)
        n_batches = math.ceil(32 / 8)
        assert len(r.decision_log) == 2 * n_batches
        epoch, batch, layer, d = MixDecision.from_log_line(r.decision_log[-1])
        assert (epoch, batch, layer) == (0, n_batches - 1, 4)

    def test_curves(self, corpus):
        _, r = self.fit(corpus, epochs=2)
        assert len(r.loss_curve) == len(r.lr_curve) == len(r.epoch_times) == 2
        assert all(t > 0 for t in r.epoch_times)

    def test_empty_stream(self):
        model = build_model(ModelConfig(block_channels=(2, 2, 2, 2)))
        with pytest.raises(ValidationError):
            train(model, RecordSet.concat([]), 1, np.random.default_rng(0))

    def test_nan_abort(self, corpus):
        model = build_model(ModelConfig(block_channels=(2, 2, 2, 2), mix_points=()))
        model.params[-1].data = np.array([np.inf])
        with pytest.raises(TrainingAborted) as info:
            train(model, corpus.select(["D0"]), 1, np.random.default_rng(0), batch_size=4, shuffle_seed=0)
        assert info.value.epoch == 0 and info.value.batch_index == 0
        assert len(info.value.sample_ids) == 4


class TestExperiment:
    def test_bookkeeping(self, corpus):
        cfg = ExperimentConfig(str(corpus.path), "D0", "ra", **SMALL)
        report = run_experiment(cfg, corpus)
        assert report.strategy == "LeastDotProduct"
        assert report.holdout == "D0" and report.seen == ["D1", "D2"]
        assert sorted(report.accuracy) == ["D0", "D1", "D2"]
        assert all(0 <= a <= 100 for a in report.accuracy.values())
        assert report.config["alpha"] == 0.3 and report.config["aug_seed"] == 2001
        assert report.seen_accuracy == pytest.approx((report.accuracy["D1"] + report.accuracy["D2"]) / 2)

    def test_strategies_isolated(self, corpus):
        reports = [run_experiment(ExperimentConfig(str(corpus.path), "D1", s, **SMALL), corpus) for s in ("m1", "ra", "m2", "m3")]
        configs = []
        for r in reports:
            c = dict(r.config)
            c.pop("strategy")
            configs.append(c)
        assert all(c == configs[0] for c in configs)
        assert [r.strategy for r in reports] == ["RandomShuffle", "LeastDotProduct", "MaxEuclidean", "MaxKL"]

    def test_seed_triple_determines_accuracy(self, corpus):
        cfg = ExperimentConfig(str(corpus.path), "D2", "ra", seed=4, **SMALL)
        a, b = run_experiment(cfg, corpus), run_experiment(cfg, corpus)
        assert a.accuracy == b.accuracy and a.decision_log == b.decision_log

    def test_none_strategy(self, corpus):
        report = run_experiment(ExperimentConfig(str(corpus.path), "D0", None, **SMALL), corpus)
        assert report.strategy == "None" and report.decision_log == []

    def test_config_round_trip(self):
        cfg = ExperimentConfig("data", "D1", "m3", seed=5).resolved()
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
        assert (cfg.init_seed, cfg.shuffle_seed, cfg.aug_seed) == (5, 1005, 2005)

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"lr": 0.0}, {"factor": 1.5}, {"strategy": "zz"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            ExperimentConfig("data", "D0", **kwargs)
