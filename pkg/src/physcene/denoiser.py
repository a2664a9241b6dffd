"""Object-token attention noise predictor, its training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from physcene import autodiff as ad
from physcene.autodiff import Tape, Tensor
from physcene.diffusion import NoiseSchedule, predict_x0
from physcene.geometry import GeometryError, RasterSpec, rasterize_polygon
from physcene.scene import FloorPlan, NormStats, Taxonomy

logger = logging.getLogger(__name__)

FLOOR_GRID = 16
CHECKPOINT_MAGIC = b"PHYSCN01"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    n_slots: int = 12
    slot_dim: int = 49
    d_model: int = 128
    heads: int = 4
    blocks: int = 4
    ff_width: int = 256
    T: int = 200

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


def floor_mask(floor: FloorPlan | object) -> np.ndarray:
    """16x16 occupancy of the plan inside its centered bounding square, flattened."""
    poly = floor.polygon if isinstance(floor, FloorPlan) else floor
    x0, z0, x1, z1 = poly.bounds()
    side = max(x1 - x0, z1 - z0)
    if not side > 0 or poly.area <= 0:
        raise GeometryError("degenerate floor plan")
    cx, cz = (x0 + x1) / 2.0, (z0 + z1) / 2.0
    spec = RasterSpec((cx - side / 2.0, cz - side / 2.0), side / FLOOR_GRID, FLOOR_GRID, FLOOR_GRID)
    return rasterize_polygon(poly, spec).cells.astype(float).reshape(-1)


def sinusoidal(t, T: int, dim: int) -> np.ndarray:
    """Sin/cos features of ``t / T`` with geometrically spaced frequencies."""
    s = np.asarray(t, dtype=float).reshape(-1, 1) / float(T)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = s * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Denoiser:
    """Noise predictor over ``N`` object tokens with additive conditioning.

    Tokens are the linearly embedded slots; a conditioning vector (time
    embedding plus floor embedding) is added to every token at the start of
    every block. Blocks are pre-norm multi-head self-attention followed by a
    SiLU feed-forward layer, both residual. There is no positional encoding
    across slots, so the network is permutation equivariant.
    """

    def __init__(self, config: DenoiserConfig, params: Optional[dict[str, Tensor]] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed)
        self._cast_cache: dict = {}

    @staticmethod
    def param_shapes(cfg: DenoiserConfig) -> list[tuple[str, tuple[int, ...]]]:
        dm, D = cfg.d_model, cfg.slot_dim
        shapes = [
            ("embed.w", (D, dm)),
            ("embed.b", (dm,)),
            ("time.w", (dm, dm)),
            ("time.b", (dm,)),
            ("floor.w", (FLOOR_GRID * FLOOR_GRID, dm)),
            ("floor.b", (dm,)),
        ]
        for k in range(cfg.blocks):
            p = f"block{k}."
            for name in ("q", "k", "v", "o"):
                shapes += [(p + name + ".w", (dm, dm)), (p + name + ".b", (dm,))]
            shapes += [
                (p + "ff1.w", (dm, cfg.ff_width)),
                (p + "ff1.b", (cfg.ff_width,)),
                (p + "ff2.w", (cfg.ff_width, dm)),
                (p + "ff2.b", (dm,)),
            ]
        shapes += [("head.w", (dm, D)), ("head.b", (D,))]
        return shapes

    @classmethod
    def init_params(cls, cfg: DenoiserConfig, seed: int = 0) -> dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(cfg):
            if name.startswith("head.") or name.endswith(".b"):
                data = np.zeros(shape)
            else:
                data = _uniform(rng, shape[0], shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return params

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _weights(self, dtype) -> dict:
        if dtype == np.float64:
            return self.params
        key = (np.dtype(dtype).str, id(self.params))
        cached = self._cast_cache.get(key)
        if cached is None:
            cached = {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}
            self._cast_cache = {key: cached}
        return cached

    def invalidate_cache(self):
        self._cast_cache = {}

    def time_embedding(self, t, dtype=np.float64) -> np.ndarray:
        p = self._weights(dtype)
        enc = sinusoidal(t, self.config.T, self.config.d_model).astype(dtype)
        return enc @ p["time.w"].data + p["time.b"].data

    def floor_condition(self, masks: np.ndarray, dtype=np.float64) -> np.ndarray:
        p = self._weights(dtype)
        return np.asarray(masks, dtype=dtype) @ p["floor.w"].data + p["floor.b"].data

    def forward(self, x, t, masks, dtype=np.float64) -> Tensor:
        """Predicted noise for a batch.

        Args:
            x: noisy scenes, ``(B, N*D)`` or ``(B, N, D)``.
            t: diffusion step, scalar or ``(B,)``.
            masks: flattened floor masks, ``(B, 256)``.

        Returns:
            Tensor of shape ``(B, N, D)``.
        """
        cfg = self.config
        p = self._weights(dtype)
        xv = np.asarray(x, dtype=dtype)
        B = xv.shape[0]
        xv = xv.reshape(B, cfg.n_slots, cfg.slot_dim)
        tt = np.broadcast_to(np.asarray(t), (B,))
        masks = np.asarray(masks, dtype=dtype).reshape(B, -1)
        enc = Tensor(sinusoidal(tt, cfg.T, cfg.d_model).astype(dtype))
        cond = enc @ p["time.w"] + p["time.b"] + Tensor(masks) @ p["floor.w"] + p["floor.b"]
        cond = ad.reshape(cond, (B, 1, cfg.d_model))
        h = Tensor(xv) @ p["embed.w"] + p["embed.b"]
        H, dh = cfg.heads, cfg.d_model // cfg.heads
        N = cfg.n_slots
        scale = 1.0 / math.sqrt(dh)
        for k in range(cfg.blocks):
            pre = f"block{k}."
            h = h + cond
            a = ad.layer_norm(h)

            def split(z):
                return ad.transpose(ad.reshape(z, (B, N, H, dh)), (0, 2, 1, 3))

            q = split(a @ p[pre + "q.w"] + p[pre + "q.b"])
            kk = split(a @ p[pre + "k.w"] + p[pre + "k.b"])
            v = split(a @ p[pre + "v.w"] + p[pre + "v.b"])
            att = ad.softmax(ad.mul(q @ ad.transpose(kk, (0, 1, 3, 2)), scale), axis=-1)
            o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, N, cfg.d_model))
            h = h + (o @ p[pre + "o.w"] + p[pre + "o.b"])
            f = ad.layer_norm(h)
            f = ad.silu(f @ p[pre + "ff1.w"] + p[pre + "ff1.b"])
            h = h + (f @ p[pre + "ff2.w"] + p[pre + "ff2.b"])
            if not np.all(np.isfinite(h.data)):
                raise FloatingPointError(f"non-finite activations in block {k}")
        out = ad.layer_norm(h) @ p["head.w"] + p["head.b"]
        return out

    def predict(self, x, t, masks, dtype=np.float32) -> np.ndarray:
        """Inference helper returning ``eps_hat`` with the input's flat shape."""
        x = np.asarray(x)
        single = x.ndim == 1
        xb = x[None] if single else x
        mb = np.asarray(masks).reshape(len(xb), -1) if np.ndim(masks) > 1 else np.tile(masks, (len(xb), 1))
        out = self.forward(xb, t, mb, dtype=dtype).data.reshape(len(xb), -1).astype(np.float64)
        return out[0] if single else out

    def eps_fn(self, masks, dtype=np.float32) -> Callable[[np.ndarray, int], np.ndarray]:
        return lambda x, t: self.predict(x, t, masks, dtype)

    def copy(self) -> "Denoiser":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Denoiser(self.config, params)


def eps_forward(model: Denoiser, x_t, t, floor_masks) -> np.ndarray:
    """``eps_hat`` as an ``(B, N, D)`` array in 64-bit precision."""
    return model.forward(x_t, t, floor_masks, dtype=np.float64).data


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 5000
    seed: int = 0
    guided_training: bool = False
    lam: float = 1.0
    gammas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    divergence_threshold: float = 1e3
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch size must be positive and steps non-negative")


def loss_and_grad(
    model: Denoiser,
    x0: np.ndarray,
    masks: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    guidance_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    lam: float = 0.0,
    t: Optional[np.ndarray] = None,
    eps: Optional[np.ndarray] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Noise-regression loss on one batch and its exact parameter gradients.

    Draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` per item unless given. When
    ``guidance_fn`` is supplied (guided training) the residual becomes
    ``eps - eps_hat - lam * var_t * g`` with ``g`` the guidance gradient at the
    predicted clean sample, treated as a constant.
    """
    x0 = np.asarray(x0, dtype=float)
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.integers(1, sched.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ah = sched.alpha_hat[np.asarray(t) - 1][:, None]
    x_t = np.sqrt(ah) * x0 + np.sqrt(1.0 - ah) * eps
    for prm in model.params.values():
        prm.zero_grad()
    with Tape() as tape:
        eps_hat = model.forward(x_t, t, masks)
        target = eps.reshape(eps_hat.shape)
        if guidance_fn is not None and lam > 0:
            eh = eps_hat.data.reshape(B, -1)
            shift = np.zeros_like(eh)
            for i in range(B):
                ti = int(t[i])
                x0_tilde = predict_x0(x_t[i], eh[i], ti, sched)
                g = guidance_fn(x0_tilde) / math.sqrt(sched.alpha_hat_t(ti))
                if np.all(np.isfinite(g)):
                    shift[i] = lam * sched.posterior_variance(ti) * g
            target = target - shift.reshape(eps_hat.shape)
        resid = ad.sub(target, eps_hat)
        loss = ad.tmean(ad.square(resid))
    if not math.isfinite(float(loss.data)):
        raise TrainingDiverged("non-finite loss")
    tape.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    return float(loss.data), grads


@dataclass
class TrainingResult:
    model: Denoiser
    losses: list[float] = field(default_factory=list)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.step_count += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(
    model: Denoiser,
    x0: np.ndarray,
    masks: np.ndarray,
    sched: NoiseSchedule,
    cfg: TrainingConfig,
    guidance_fn=None,
    callback: Optional[Callable[[int, float, Denoiser], None]] = None,
) -> TrainingResult:
    """Adam on the noise-regression loss; deterministic for a fixed seed."""
    x0 = np.asarray(x0, dtype=float)
    masks = np.asarray(masks, dtype=float)
    if len(x0) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    losses: list[float] = []
    order = rng.permutation(len(x0))
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(x0))
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        if len(idx) < cfg.batch_size:
            # dataset smaller than a batch
            idx = rng.choice(len(x0), cfg.batch_size, replace=True)
        cursor += cfg.batch_size
        loss, grads = loss_and_grad(
            model,
            x0[idx],
            masks[idx],
            sched,
            rng,
            guidance_fn=guidance_fn if cfg.guided_training else None,
            lam=cfg.lam,
        )
        if loss > cfg.divergence_threshold:
            raise TrainingDiverged(
                f"loss {loss:.4g} exceeded {cfg.divergence_threshold:g} at step {step} "
                f"(recent losses: {[round(v, 4) for v in losses[-5:]]})"
            )
        opt.step(grads)
        losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d loss %.5f", step, float(np.mean(losses[-cfg.log_every :])))
        if callback is not None:
            callback(step, loss, model)
    model.invalidate_cache()
    return TrainingResult(model, losses)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: Denoiser
    stats: NormStats
    taxonomy: Taxonomy
    beta_start: float = 1e-4
    beta_end: float = 0.02
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write magic, a length-prefixed JSON header, then float64 tensors."""
    cfg = ckpt.model.config
    meta = {
        "N": cfg.n_slots,
        "C": ckpt.taxonomy.n_channels,
        "D": cfg.slot_dim,
        "d_model": cfg.d_model,
        "B": cfg.blocks,
        "heads": cfg.heads,
        "ff_width": cfg.ff_width,
        "T": cfg.T,
        "beta_start": ckpt.beta_start,
        "beta_end": ckpt.beta_end,
        "categories": list(ckpt.taxonomy.categories),
        "norm_stats": ckpt.stats.to_dict(),
        "tensors": [[name, list(shape)] for name, shape in Denoiser.param_shapes(cfg)],
        "extra": ckpt.extra,
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name, _ in Denoiser.param_shapes(cfg):
            fh.write(np.ascontiguousarray(ckpt.model.params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16 : 16 + n].decode("utf-8"))
    cfg = DenoiserConfig(
        n_slots=meta["N"],
        slot_dim=meta["D"],
        d_model=meta["d_model"],
        heads=meta["heads"],
        blocks=meta["B"],
        ff_width=meta["ff_width"],
        T=meta["T"],
    )
    offset = 16 + n
    params = {}
    for name, shape in Denoiser.param_shapes(cfg):
        count = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
        params[name] = Tensor(data.copy(), requires_grad=True, name=name)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensors")
    return Checkpoint(
        Denoiser(cfg, params),
        NormStats.from_dict(meta["norm_stats"]),
        Taxonomy(tuple(meta["categories"])),
        meta.get("beta_start", 1e-4),
        meta.get("beta_end", 0.02),
        meta.get("extra", {}),
    )


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)
