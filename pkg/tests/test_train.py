import dataclasses
import math

import numpy as np
import pytest
import torch

from flexivit.data import gen_shapes
from flexivit.embedding import TilingError
from flexivit.encoder import EncoderConfig, init_params
from flexivit.train import (
    Curriculum,
    NumericalError,
    PatchSizeDistribution,
    TrainConfig,
    curriculum_distribution,
    distill_loss,
    learning_rate,
    sample_patch_size,
    supervised_loss,
    teacher_init,
    train_flexi,
    triangular_distribution,
)

TINY = EncoderConfig(depth=1, width=16, heads=2, mlp_ratio=2, num_classes=8, underlying_patch=8, underlying_grid=4)
SIZES = (24, 16, 12, 8, 6)


@pytest.fixture(scope="module")
def tiny_data():
    return gen_shapes(0, 64)


def log_softmax_oracle(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


class TestSampling:
    def test_single_size(self):
        rng = np.random.default_rng(0)
        dist = PatchSizeDistribution.uniform([16])
        assert {sample_patch_size(dist, rng) for _ in range(200)} == {16}

    def test_uniform_frequencies(self):
        sizes = [48, 40, 30, 24, 20, 16, 15, 12, 10, 8]
        dist = PatchSizeDistribution.uniform(sizes)
        rng = np.random.default_rng(1)
        draws = np.array([sample_patch_size(dist, rng) for _ in range(100_000)])
        for s in sizes:
            assert abs(np.mean(draws == s) - 0.1) <= 0.01

    def test_deterministic_given_rng_state(self):
        dist = PatchSizeDistribution.uniform(SIZES)
        a = [sample_patch_size(dist, np.random.default_rng(5)) for _ in range(3)]
        assert len(set(a)) == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            PatchSizeDistribution((8, 16), (0.0, 0.0))
        with pytest.raises(ValueError):
            PatchSizeDistribution((8, 16, 12), (1, 1, 1))
        with pytest.raises(ValueError):
            PatchSizeDistribution((8,), (-1.0,))

    def test_tiling_check(self):
        with pytest.raises(TilingError):
            PatchSizeDistribution.uniform([24, 10]).check_tiles(48)


class TestTriangular:
    def test_weights(self):
        assert triangular_distribution([8, 16, 30, 48]).weights == (1, 3, 3, 1)

    def test_all_inside_uniform(self):
        d = triangular_distribution([30, 24, 20, 16])
        np.testing.assert_allclose(d.probs, 0.25)

    def test_empirical_ratio(self):
        sizes = [48, 40, 30, 24, 20, 16, 15, 12, 10, 8]
        dist = triangular_distribution(sizes)
        rng = np.random.default_rng(2)
        draws = np.array([sample_patch_size(dist, rng) for _ in range(100_000)])
        inner = np.mean([np.mean(draws == s) for s in sizes if 16 <= s <= 30])
        outer = np.mean([np.mean(draws == s) for s in sizes if not 16 <= s <= 30])
        assert abs(inner / outer - 3.0) < 0.1


class TestCurriculum:
    cur = Curriculum(
        PatchSizeDistribution.uniform([24]), PatchSizeDistribution.uniform([6]), 0.75, 0.4, 1000
    )

    def test_phases(self):
        assert curriculum_distribution(self.cur, 0) == self.cur.large_dist
        assert curriculum_distribution(self.cur, 749) == self.cur.large_dist
        assert curriculum_distribution(self.cur, 900) == self.cur.target_dist
        assert curriculum_distribution(self.cur, 850) == self.cur.target_dist

    def test_ramp_span(self):
        assert (self.cur.ramp_start, self.cur.ramp_start + self.cur.ramp_length) == (750, 850)
        assert curriculum_distribution(self.cur, 750).sizes == (24, 6)
        assert curriculum_distribution(self.cur, 849).sizes == (24, 6)

    def test_ramp_midpoint(self):
        np.testing.assert_allclose(curriculum_distribution(self.cur, 800).probs, [0.5, 0.5])

    def test_ramp_linear(self):
        probs = [curriculum_distribution(self.cur, s).probs[1] for s in range(750, 850)]
        np.testing.assert_allclose(np.diff(probs), 0.01, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            curriculum_distribution(self.cur, 1000)
        with pytest.raises(ValueError):
            curriculum_distribution(self.cur, -1)

    def test_degenerate_is_target(self):
        cur = Curriculum(self.cur.large_dist, self.cur.target_dist, 0.0, 0.0, 50)
        assert all(curriculum_distribution(cur, s) == cur.target_dist for s in range(50))


class TestLosses:
    def test_confident_correct(self):
        logits = torch.tensor([[0.0, 60.0, 0.0]], dtype=torch.float64)
        assert float(supervised_loss(logits, torch.tensor([1]))) < 1e-20

    def test_uniform_logits(self):
        loss = supervised_loss(torch.zeros(4, 7, dtype=torch.float64), torch.tensor([0, 1, 2, 6]))
        assert abs(float(loss) - math.log(7)) < 1e-15

    def test_xent_oracle(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((6, 5)) * 3
        y = rng.integers(0, 5, 6)
        expected = -np.mean(log_softmax_oracle(z)[np.arange(6), y])
        got = float(supervised_loss(torch.tensor(z), torch.tensor(y)))
        assert abs(got - expected) < 1e-12

    def test_distill_identical_zero(self):
        z = torch.randn(4, 6, dtype=torch.float64)
        assert abs(float(distill_loss(z, z.clone()))) < 1e-15

    def test_default_temperature(self):
        assert TrainConfig().temperature == 1.0
        z, t = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
        assert float(distill_loss(z, t)) == float(distill_loss(z, t, 1.0))

    @pytest.mark.parametrize("temperature", [1.0, 2.5])
    def test_distill_oracle(self, temperature):
        rng = np.random.default_rng(4)
        s, t = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
        log_q = log_softmax_oracle(s / temperature)
        log_p = log_softmax_oracle(t / temperature)
        expected = np.mean(np.sum(np.exp(log_p) * (log_p - log_q), axis=-1))
        got = float(distill_loss(torch.tensor(s), torch.tensor(t), temperature))
        assert abs(got - expected) < 1e-12

    def test_distill_gradient_zero_iff_matching(self):
        t = torch.randn(2, 5, dtype=torch.float64)
        s = t.clone().requires_grad_(True)
        distill_loss(s, t).backward()
        assert float(s.grad.abs().max()) < 1e-15
        # a constant shift leaves the softmax unchanged
        s2 = (t + 3.0).requires_grad_(True)
        distill_loss(s2, t).backward()
        assert float(s2.grad.abs().max()) < 1e-12
        s3 = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
        distill_loss(s3, t).backward()
        assert float(s3.grad.abs().max()) > 1e-3

    def test_teacher_gets_no_gradient(self):
        t = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
        s = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
        distill_loss(s, t).backward()
        assert t.grad is None

    def test_distill_validation(self):
        with pytest.raises(ValueError):
            distill_loss(torch.zeros(2, 3), torch.zeros(2, 3), 0.0)
        with pytest.raises(ValueError):
            distill_loss(torch.zeros(2, 3), torch.zeros(2, 4))


class TestTeacherInit:
    def test_identity_when_shapes_match(self):
        teacher = init_params(TINY, 1)
        student = teacher_init(teacher, TINY.underlying_patch, TINY.underlying_grid)
        for (k, a), (_, b) in zip(teacher.state_dict().items(), student.state_dict().items()):
            assert torch.equal(a, b), k

    def test_encoder_copied_and_embeddings_resized(self):
        teacher = init_params(dataclass_replace(TINY, underlying_patch=6, underlying_grid=8), 2)
        student = teacher_init(teacher, 32, 7)
        assert student.embed.kernel.shape == (32, 32, 1, 16)
        assert student.pos.grid.shape == (7, 7, 16)
        ts, ss = teacher.state_dict(), student.state_dict()
        for k in ts:
            if k not in ("embed.kernel", "pos.grid"):
                assert torch.equal(ts[k], ss[k]), k

    def test_dim_mismatch(self):
        teacher = init_params(TINY, 1)
        with pytest.raises(ValueError, match="width"):
            teacher_init(teacher, 32, 7, student_config=dataclass_replace(TINY, width=32))


def dataclass_replace(cfg, **kw):
    import dataclasses

    return dataclasses.replace(cfg, **kw)


class TestSchedule:
    def test_warmup_then_cosine(self):
        cfg = TrainConfig(steps=100, lr=1.0, warmup_steps=10)
        assert learning_rate(cfg, 0) == pytest.approx(0.1)
        assert learning_rate(cfg, 9) == pytest.approx(1.0)
        assert learning_rate(cfg, 10) == pytest.approx(1.0)
        assert learning_rate(cfg, 55) == pytest.approx(0.5)
        assert learning_rate(cfg, 99) < 0.001

    def test_constant(self):
        cfg = TrainConfig(steps=100, lr=0.5, warmup_steps=0, cosine=False)
        assert learning_rate(cfg, 80) == 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=10, warmup_steps=20)
        with pytest.raises(ValueError):
            TrainConfig(temperature=0)
        with pytest.raises(ValueError):
            TrainConfig(loss="mse")


def _cfg(**kw):
    base = dict(steps=5, batch_size=8, lr=1e-3, warmup_steps=1, eval_sizes=(24, 6))
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_lr_zero_keeps_params(self, tiny_data):
        model = init_params(TINY, 0)
        trained, _ = train_flexi(_cfg(lr=0.0), PatchSizeDistribution.uniform(SIZES), tiny_data, model)
        for (k, a), (_, b) in zip(model.state_dict().items(), trained.state_dict().items()):
            assert torch.equal(a, b), k

    def test_bit_reproducible(self, tiny_data):
        runs = [
            train_flexi(_cfg(seed=3), PatchSizeDistribution.uniform(SIZES), tiny_data, init_params(TINY, 0))[1]
            for _ in range(2)
        ]
        assert runs[0].steps_csv() == runs[1].steps_csv()
        assert runs[0].evals_csv() == runs[1].evals_csv()

    def test_single_size_is_fixed_training(self, tiny_data):
        _, log = train_flexi(_cfg(steps=8), PatchSizeDistribution.uniform([12]), tiny_data, init_params(TINY, 0))
        assert {p for _, p, _, _ in log.steps} == {12}

    def test_metric_csv_headers(self, tiny_data):
        _, log = train_flexi(_cfg(), PatchSizeDistribution.uniform(SIZES), tiny_data, init_params(TINY, 0))
        assert log.steps_csv().splitlines()[0] == "step,patch_size,loss,lr"
        assert log.evals_csv().splitlines()[0] == "step,patch_size,accuracy"
        assert len(log.steps) == 5 and len(log.evals) == 2

    def test_periodic_eval(self, tiny_data):
        _, log = train_flexi(_cfg(steps=6, eval_every=2), PatchSizeDistribution.uniform([12]), tiny_data, init_params(TINY, 0))
        assert sorted({s for s, _, _ in log.evals}) == [2, 4, 6]

    def test_curriculum_sizes_follow_schedule(self, tiny_data):
        cur = Curriculum(PatchSizeDistribution.uniform([24]), PatchSizeDistribution.uniform([8]), 0.5, 0.0, 10)
        _, log = train_flexi(_cfg(steps=10), cur, tiny_data, init_params(TINY, 0))
        assert [p for _, p, _, _ in log.steps] == [24] * 5 + [8] * 5

    def test_tiling_violation(self, tiny_data):
        with pytest.raises(TilingError):
            train_flexi(_cfg(), PatchSizeDistribution.uniform([10]), tiny_data, init_params(TINY, 0))

    def test_nan_aborts(self, tiny_data):
        model = init_params(TINY, 0)
        with torch.no_grad():
            model.head.bias.fill_(float("nan"))
        with pytest.raises(NumericalError, match="step 0"):
            train_flexi(_cfg(), PatchSizeDistribution.uniform([12]), tiny_data, model)

    def test_distill_requires_teacher(self, tiny_data):
        with pytest.raises(ValueError, match="teacher"):
            train_flexi(_cfg(loss="distill"), PatchSizeDistribution.uniform([12]), tiny_data, init_params(TINY, 0))

    def test_distill_runs(self, tiny_data):
        teacher = init_params(TINY, 5)
        with torch.no_grad():
            teacher.head.weight.normal_(generator=torch.Generator().manual_seed(0))
        _, log = train_flexi(
            _cfg(loss="distill", teacher_patch=8), PatchSizeDistribution.uniform(SIZES), tiny_data, init_params(TINY, 0), teacher=teacher
        )
        assert all(math.isfinite(l) for _, _, l, _ in log.steps)

    def test_loss_decreases(self):
        data = gen_shapes(10, 512)
        model = init_params(EncoderConfig(depth=2, width=32, heads=2, underlying_patch=8), 0)
        cfg = TrainConfig(steps=200, batch_size=32, lr=1e-3, warmup_steps=20, eval_sizes=())
        _, log = train_flexi(cfg, PatchSizeDistribution.uniform(SIZES), data, model)
        assert log.steps[-1][2] < log.steps[0][2]


class TestFlexibleDepth:
    def test_truncated_blocks_untouched(self, tiny_data):
        cfg = dataclasses.replace(TINY, depth=2)
        model = init_params(cfg, 0)
        trained, _ = train_flexi(_cfg(depth_choices=(1,)), PatchSizeDistribution.uniform([12]), tiny_data, model)
        after = trained.state_dict()
        unchanged = {k for k, v in model.state_dict().items() if torch.equal(v, after[k])}
        assert unchanged == {k for k in after if k.startswith("blocks.1.")}

    def test_depth_beyond_model(self, tiny_data):
        with pytest.raises(ValueError, match="exceed model depth"):
            train_flexi(_cfg(depth_choices=(1, 2)), PatchSizeDistribution.uniform([12]), tiny_data, init_params(TINY, 0))
