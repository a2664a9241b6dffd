import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physcene import autodiff as ad
from physcene.autodiff import Tape, Tensor, gradient_check
from physcene.denoiser import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    Denoiser,
    DenoiserConfig,
    TrainingConfig,
    TrainingDiverged,
    eps_forward,
    floor_mask,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    sinusoidal,
    train,
)
from physcene.diffusion import make_schedule
from physcene.geometry import GeometryError
from physcene.scene import FloorPlan, NormStats, Taxonomy

DATA = Path(__file__).parent / "data"
SCHED = make_schedule(200)
TINY = DenoiserConfig(n_slots=3, slot_dim=6, d_model=8, heads=2, blocks=1, ff_width=16, T=200)
RECT = [(-2.0, -1.5), (2.0, -1.5), (2.0, 1.5), (-2.0, 1.5)]
L_SHAPE = [(-2.0, -2.0), (2.0, -2.0), (2.0, 0.0), (0.0, 0.0), (0.0, 2.0), (-2.0, 2.0)]


def _randomized(cfg: DenoiserConfig, seed: int) -> Denoiser:
    """A model with every parameter (including the zero-initialized head) random."""
    m = Denoiser(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for p in m.params.values():
        p.data[...] = rng.normal(scale=0.5, size=p.data.shape)
    return m


class TestAutodiff:
    def test_elementwise_chain(self):
        x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.tsum(ad.silu(x) * x)
        tape.backward(y)
        s = 1.0 / (1.0 + np.exp(-x.data))
        expected = s * x.data * (1 + x.data * (1 - s)) + x.data * s
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_ops_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        c = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)

        def f():
            h = ad.layer_norm(a @ b) / c
            return ad.tmean(ad.square(ad.softmax(h, axis=-1) - 0.2) + ad.silu(h))

        assert gradient_check(f, [a, b, c]) < 1e-6

    def test_broadcast_gradient_reduces(self):
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            y = ad.tsum(x + b)
        tape.backward(y)
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


class TestFloorCondition:
    def test_translation_invariant(self):
        m = Denoiser(DenoiserConfig())
        a = floor_mask(FloorPlan(RECT))
        b = floor_mask(FloorPlan([(x + 7.3, z - 2.1) for x, z in RECT]))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(m.floor_condition(a), m.floor_condition(b))

    def test_different_plans_differ(self):
        assert not np.array_equal(floor_mask(FloorPlan(RECT)), floor_mask(FloorPlan(L_SHAPE)))

    def test_linear_in_disjoint_masks(self):
        m = Denoiser(DenoiserConfig(), seed=2)
        rng = np.random.default_rng(0)
        m.params["floor.b"].data[...] = rng.normal(size=m.config.d_model)
        m1 = np.zeros(256)
        m2 = np.zeros(256)
        m1[:100] = 1.0
        m2[150:] = 1.0
        e = m.floor_condition
        np.testing.assert_allclose(e(m1) + e(m2) - e(np.zeros(256)), e(m1 + m2), atol=1e-12)

    def test_degenerate_plan(self):
        class Flat:
            area = 0.0

            def bounds(self):
                return (0.0, 0.0, 1.0, 0.0)

        with pytest.raises(GeometryError):
            floor_mask(Flat())


class TestTimeEmbedding:
    m = Denoiser(DenoiserConfig(), seed=1)

    def test_distinct_steps(self):
        emb = self.m.time_embedding(np.arange(1, 201))
        assert len({row.tobytes() for row in emb}) == 200
        d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
        assert d[~np.eye(200, dtype=bool)].min() > 1e-6

    def test_deterministic(self):
        np.testing.assert_array_equal(self.m.time_embedding(42), self.m.time_embedding(42))

    def test_bounded_by_operator_norm(self):
        w, b = self.m.params["time.w"].data, self.m.params["time.b"].data
        enc = sinusoidal(np.arange(1, 201), 200, 128)
        bound = np.linalg.norm(w, 2) * np.linalg.norm(enc, axis=1) + np.linalg.norm(b)
        emb = self.m.time_embedding(np.arange(1, 201))
        assert np.all(np.abs(emb).max(axis=1) <= bound + 1e-12)


class TestForward:
    def test_zero_head_gives_zero_output(self):
        m = Denoiser(DenoiserConfig(n_slots=4), seed=0)
        x = np.random.default_rng(0).normal(size=(2, 4 * 49))
        np.testing.assert_array_equal(eps_forward(m, x, 10, np.ones((2, 256))), 0.0)

    def test_zero_weights_zero_output(self):
        m = Denoiser(TINY)
        for p in m.params.values():
            p.data[...] = 0.0
        out = eps_forward(m, np.ones((1, 18)), 5, np.ones((1, 256)))
        np.testing.assert_array_equal(out, 0.0)

    @given(st.permutations(range(5)), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_permutation_equivariant(self, perm, seed):
        cfg = DenoiserConfig(n_slots=5, slot_dim=7, d_model=16, heads=4, blocks=2, ff_width=24)
        m = _randomized(cfg, seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 5, 7))
        mask = (rng.uniform(size=(1, 256)) > 0.5).astype(float)
        perm = list(perm)
        a = eps_forward(m, x, 33, mask)[:, perm]
        b = eps_forward(m, x[:, perm], 33, mask)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_golden_output(self):
        g = np.load(DATA / "golden_eps.npz")
        cfg = DenoiserConfig(n_slots=3, slot_dim=49, d_model=16, heads=2, blocks=2, ff_width=32, T=200)
        m = Denoiser(cfg, seed=3)
        m.params["head.w"].data[...] = g["head_w"]
        m.params["head.b"].data[...] = g["head_b"]
        out = eps_forward(m, g["x"], np.array([17, 150]), g["masks"])
        np.testing.assert_allclose(out, g["out"], rtol=1e-12, atol=1e-12)

    def test_nonfinite_activation_names_block(self):
        cfg = DenoiserConfig(n_slots=2, slot_dim=4, d_model=8, heads=2, blocks=3, ff_width=8)
        m = Denoiser(cfg)
        m.params["block1.ff2.b"].data[0] = np.inf
        with pytest.raises(FloatingPointError, match="block 1"):
            eps_forward(m, np.zeros((1, 8)), 3, np.ones((1, 256)))

    def test_float32_close_to_float64(self):
        m = _randomized(TINY, 5)
        x = np.random.default_rng(1).normal(size=(3, 18))
        a = m.predict(x, 50, np.ones((3, 256)), dtype=np.float32)
        b = m.predict(x, 50, np.ones((3, 256)), dtype=np.float64)
        np.testing.assert_allclose(a, b, rtol=1e-3, atol=1e-3)


class TestLoss:
    def test_perfect_predictor_zero_loss(self):
        eps = np.random.default_rng(0).normal(size=(2, 18))

        class Oracle(Denoiser):
            def forward(self, x, t, masks, dtype=np.float64):
                return Tensor(eps.reshape(2, 3, 6))

        loss, _ = loss_and_grad(
            Oracle(TINY),
            np.zeros((2, 18)),
            np.ones((2, 256)),
            SCHED,
            np.random.default_rng(0),
            t=np.array([3, 9]),
            eps=eps,
        )
        assert loss == 0.0

    def test_quadratic_in_noise(self):
        m = Denoiser(TINY)  # zero head: eps_hat is identically zero
        eps = np.random.default_rng(0).normal(size=(4, 18))
        t = np.array([1, 50, 100, 200])
        args = (m, np.zeros((4, 18)), np.ones((4, 256)), SCHED, np.random.default_rng(0))
        l1, _ = loss_and_grad(*args, t=t, eps=eps)
        l2, _ = loss_and_grad(*args, t=t, eps=2 * eps)
        assert l2 == pytest.approx(4.0 * l1, rel=1e-14)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_and_grad(Denoiser(TINY), np.zeros((0, 18)), np.zeros((0, 256)), SCHED, np.random.default_rng(0))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_match_central_differences(self, seed):
        m = _randomized(TINY, seed)
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(-1, 1, (2, 18))
        masks = (rng.uniform(size=(2, 256)) > 0.5).astype(float)
        t = rng.integers(1, 201, size=2)
        eps = rng.normal(size=(2, 18))

        def loss():
            return loss_and_grad(m, x0, masks, SCHED, rng, t=t, eps=eps)[0]

        _, grads = loss_and_grad(m, x0, masks, SCHED, rng, t=t, eps=eps)
        h = 1e-6
        pick = np.random.default_rng(seed + 7)
        worst = 0.0
        for name, p in m.params.items():
            flat = p.data.reshape(-1)
            idx = pick.choice(flat.size, min(flat.size, 40), replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp = loss()
                flat[i] = old - h
                fm = loss()
                flat[i] = old
                num = (fp - fm) / (2 * h)
                a = grads[name].reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a) + abs(num), 1e-6))
        assert worst <= 1e-3

    def test_guided_residual_shifts_target(self):
        m = Denoiser(TINY)
        x0 = np.zeros((1, 18))
        t = np.array([2])
        eps = np.zeros((1, 18))
        args = (m, x0, np.ones((1, 256)), SCHED, np.random.default_rng(0))
        l0, _ = loss_and_grad(*args, t=t, eps=eps)
        g = np.ones(18)
        l1, _ = loss_and_grad(*args, guidance_fn=lambda x: g, lam=3.0, t=t, eps=eps)
        shift = 3.0 * SCHED.posterior_variance(2) / math.sqrt(SCHED.alpha_hat_t(2))
        assert l0 == 0.0
        assert l1 == pytest.approx(shift**2, rel=1e-12)


def _overfit_data(n_slots, batch, seed=1):
    x0 = np.random.default_rng(seed).uniform(-1, 1, (1, n_slots * 49)).repeat(batch, 0)
    return x0, np.ones((batch, 256))


def _fixed_eval(model, x0):
    rng = np.random.default_rng(99)
    t = np.arange(1, 201)
    eps = rng.standard_normal((200, x0.shape[1]))
    return loss_and_grad(model, np.repeat(x0[:1], 200, 0), np.ones((200, 256)), SCHED, rng, t=t, eps=eps)[0]


class TestTraining:
    def test_overfits_single_scene(self):
        cfg = DenoiserConfig(n_slots=4, slot_dim=49, d_model=64, heads=4, blocks=1, ff_width=128)
        m = Denoiser(cfg, seed=0)
        x0, masks = _overfit_data(4, 128)
        before = _fixed_eval(m, x0)
        train(m, x0, masks, SCHED, TrainingConfig(learning_rate=3e-3, batch_size=128, steps=200, seed=0))
        after = _fixed_eval(m, x0)
        assert after < 0.1 * before

    def test_same_seed_identical_parameters(self):
        x0, masks = _overfit_data(3, 8)
        x0 = x0[:, :18]
        runs = []
        for _ in range(2):
            m = Denoiser(TINY, seed=4)
            train(m, x0, masks, SCHED, TrainingConfig(learning_rate=1e-2, batch_size=4, steps=15, seed=9))
            runs.append(m)
        for k in runs[0].params:
            assert runs[0].params[k].data.tobytes() == runs[1].params[k].data.tobytes()

    def test_zero_learning_rate_leaves_parameters(self):
        m = _randomized(TINY, 0)
        before = {k: v.data.copy() for k, v in m.params.items()}
        x0 = np.random.default_rng(0).uniform(-1, 1, (6, 18))
        train(m, x0, np.ones((6, 256)), SCHED, TrainingConfig(learning_rate=0.0, batch_size=4, steps=5))
        for k, v in m.params.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_divergence_aborts(self):
        m = _randomized(TINY, 0)
        x0 = np.random.default_rng(0).uniform(-1, 1, (6, 18))
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=4, steps=5, divergence_threshold=1e-3)
        with pytest.raises(TrainingDiverged, match="step 1"):
            train(m, x0, np.ones((6, 256)), SCHED, cfg)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainingConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            TrainingConfig(batch_size=0)


class TestCheckpoint:
    def _ckpt(self):
        stats = NormStats((0.1,) * 3, (3.0,) * 3, (-3.0, 0.0, -3.0), (3.0, 2.0, 3.0))
        return Checkpoint(_randomized(TINY, 2), stats, Taxonomy(), extra={"steps": 5})

    def test_round_trip(self, tmp_path):
        ck = self._ckpt()
        path = tmp_path / "m.bin"
        save_checkpoint(path, ck)
        back = load_checkpoint(path)
        assert back.model.config == TINY
        assert back.taxonomy == ck.taxonomy
        assert back.extra == {"steps": 5}
        np.testing.assert_array_equal(back.stats.loc_max, ck.stats.loc_max)
        for k, v in ck.model.params.items():
            assert back.model.params[k].data.tobytes() == v.data.tobytes()
        save_checkpoint(tmp_path / "again.bin", back)
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "m.bin"
        save_checkpoint(path, self._ckpt())
        raw = path.read_bytes()
        assert raw[:8] == CHECKPOINT_MAGIC
        n = int.from_bytes(raw[8:16], "little")
        n_params = Denoiser(TINY).n_parameters()
        assert len(raw) == 16 + n + 8 * n_params

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.bin"
        save_checkpoint(path, self._ckpt())
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)
