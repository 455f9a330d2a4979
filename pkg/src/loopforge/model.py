"""The weight-tied transition network and everything attached to it.

One transition operator (a couple of post-norm transformer blocks) is
applied over and over to a latent pair (y, z): z is a scratchpad updated
from x + y + z, y is the answer carrier updated from y + z.  A recursion
window runs several of those cycles, mostly without gradient, and ends by
decoding y into per-cell logits plus a scalar halting/correctness logit.

Sequences carry one extra leading position holding the task embedding; it
is dropped again before decoding, so logits stay M x vocab.

Checkpoints are a small binary container: magic "LTRM", a version, a JSON
header, then the raw float32 arrays in sorted name order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad

VOCAB_SIZE = 11          # colours + PAD; the decoder never predicts MASK
LABEL_ROWS = VOCAB_SIZE + 1   # label embeddings additionally know MASK
STATE_NOISE_STD = 0.02

CHECKPOINT_MAGIC = b"LTRM"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_size: int = 128
    num_heads: int = 4
    num_layers: int = 2
    expansion: int = 4
    vocab_size: int = VOCAB_SIZE
    seq_len: int = 64
    inner_steps: int = 6         # latent steps per cycle (n)
    cycles_per_window: int = 3   # cycles per recursion window (T)
    max_halt_steps: int = 16
    single_z: bool = False
    num_tasks: int = 1
    untied_depth: int = 0        # 0 = weight-tied; else one weight set per application

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ModelError(f"hidden_size {self.hidden_size} not divisible by "
                             f"{self.num_heads} heads")
        if (self.hidden_size // self.num_heads) % 2 != 0:
            raise ModelError("head dimension must be even for rotary positions")
        if self.vocab_size != VOCAB_SIZE:
            raise ModelError(f"vocab_size is fixed at {VOCAB_SIZE} (colours + PAD)")
        for name in ("num_layers", "expansion", "seq_len", "inner_steps",
                     "cycles_per_window", "max_halt_steps", "num_tasks"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")

    @property
    def apps_per_cycle(self) -> int:
        return self.inner_steps if self.single_z else self.inner_steps + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentState:
    y: ad.Tensor
    z: ad.Tensor
    window_index: int = 0


class Parameters:
    """Named float arrays; the single owner of all trainable state."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator,
             dtype=np.float32) -> "Parameters":
        d, e = cfg.hidden_size, cfg.expansion
        arrays: dict[str, np.ndarray] = {}

        def linear(name, fan_in, fan_out):
            arrays[name] = (rng.normal(size=(fan_in, fan_out))
                            / np.sqrt(fan_in)).astype(dtype)

        for s in range(max(1, cfg.untied_depth)):
            p = "phi" if cfg.untied_depth == 0 else f"phi{s}"
            for i in range(cfg.num_layers):
                base = f"{p}/l{i}"
                for w in ("wq", "wk", "wv", "wo"):
                    linear(f"{base}/attn/{w}", d, d)
                arrays[f"{base}/attn/gain"] = np.ones(d, dtype=dtype)
                linear(f"{base}/mlp/w1", d, e * d)
                linear(f"{base}/mlp/w2", e * d, d)
                arrays[f"{base}/mlp/gain"] = np.ones(d, dtype=dtype)
        arrays["embed/input"] = (rng.normal(size=(VOCAB_SIZE, d)) / np.sqrt(d)).astype(dtype)
        arrays["embed/label"] = (rng.normal(size=(LABEL_ROWS, d)) / np.sqrt(d)).astype(dtype)
        arrays["embed/task"] = np.zeros((cfg.num_tasks, d), dtype=dtype)
        # both read-out heads start at zero: logits begin exactly uniform,
        # which keeps early gradient in the signal path instead of spending
        # it on collapsing the state to fix miscalibrated random logits
        arrays["decode/w"] = np.zeros((d, cfg.vocab_size), dtype=dtype)
        arrays["q/w"] = np.zeros((d, 1), dtype=dtype)
        arrays["q/b"] = np.full(1, -5.0, dtype=dtype)  # start far from halting
        arrays["state/y0"] = np.zeros(d, dtype=dtype)
        arrays["state/z0"] = np.zeros(d, dtype=dtype)
        return cls(arrays)

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = value


def wrap_parameters(params: Parameters, requires_grad: bool = True) -> dict[str, ad.Tensor]:
    """Fresh leaf tensors over the parameter arrays, one graph's worth."""
    return {name: ad.Tensor(arr, requires_grad=requires_grad, op=name)
            for name, arr in params.arrays.items()}


# ---------------------------------------------------------------------------
# transition network


def _phi_prefix(cfg: ModelConfig, app_index: int) -> str:
    if cfg.untied_depth == 0:
        return "phi"
    if app_index >= cfg.untied_depth:
        raise ModelError(f"application {app_index} exceeds untied depth "
                         f"{cfg.untied_depth}")
    return f"phi{app_index}"


def phi_apply(pt: dict, cfg: ModelConfig, h: ad.Tensor, app_index: int = 0) -> ad.Tensor:
    """One application of the transition operator: num_layers post-norm blocks."""
    p = _phi_prefix(cfg, app_index)
    for i in range(cfg.num_layers):
        base = f"{p}/l{i}"
        q = ad.rope(ad.matmul(h, pt[f"{base}/attn/wq"]), cfg.num_heads)
        k = ad.rope(ad.matmul(h, pt[f"{base}/attn/wk"]), cfg.num_heads)
        v = ad.matmul(h, pt[f"{base}/attn/wv"])
        att = ad.matmul(ad.attention(q, k, v, cfg.num_heads), pt[f"{base}/attn/wo"])
        h = ad.rms_norm(ad.add(h, att), pt[f"{base}/attn/gain"])
        mlp = ad.matmul(ad.silu(ad.matmul(h, pt[f"{base}/mlp/w1"])), pt[f"{base}/mlp/w2"])
        h = ad.rms_norm(ad.add(h, mlp), pt[f"{base}/mlp/gain"])
    return h


# ---------------------------------------------------------------------------
# embeddings and state initialisation


def embed_input(pt: dict, cfg: ModelConfig, tokens: np.ndarray,
                task_rows: np.ndarray) -> ad.Tensor:
    """Token + task embedding, shape (B, M+1, d); task sits at position 0.

    Rows are initialised at norm ~1 but the post-norm blocks keep the
    latent pair at norm ~sqrt(d) per position, so the lookup is scaled by
    sqrt(d) to enter the recursion at state magnitude.  Without the scale
    the operator settles into an input-blind fixed point.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ModelError(f"expected tokens (batch, {cfg.seq_len}), got {tokens.shape}")
    if tokens.size and tokens.max() >= VOCAB_SIZE:
        raise ModelError("input tokens must be colours or PAD; MASK belongs to labels")
    tok = ad.gather(pt["embed/input"], tokens)
    task = ad.reshape(ad.gather(pt["embed/task"], np.asarray(task_rows)),
                      (tokens.shape[0], 1, cfg.hidden_size))
    return ad.scale(ad.concat([task, tok], axis=1), math.sqrt(cfg.hidden_size))


def embed_label(pt: dict, cfg: ModelConfig, tokens: np.ndarray) -> ad.Tensor:
    """Label-table lookup scaled like embed_input, shape (B, M, d)."""
    tokens = np.asarray(tokens)
    if tokens.size and tokens.max() >= LABEL_ROWS:
        raise ModelError(f"label token {tokens.max()} outside the label table")
    return ad.scale(ad.gather(pt["embed/label"], tokens),
                    math.sqrt(cfg.hidden_size))


def _broadcast_row(row: ad.Tensor, batch: int, positions: int) -> ad.Tensor:
    d = row.shape[0]
    zeros = ad.constant(np.zeros((batch, positions, 1), dtype=row.value.dtype))
    return ad.add(ad.reshape(row, (1, 1, d)), zeros)


def init_state(pt: dict, cfg: ModelConfig, batch: int,
               rng: np.random.Generator) -> LatentState:
    """Learned initial rows broadcast over positions, plus small noise."""
    n = cfg.seq_len + 1
    dtype = pt["state/y0"].value.dtype
    noise_y = ad.constant(
        (rng.standard_normal((batch, n, cfg.hidden_size)) * STATE_NOISE_STD).astype(dtype))
    noise_z = ad.constant(
        (rng.standard_normal((batch, n, cfg.hidden_size)) * STATE_NOISE_STD).astype(dtype))
    y = ad.add(ad.reshape(pt["state/y0"], (1, 1, cfg.hidden_size)), noise_y)
    z = ad.add(ad.reshape(pt["state/z0"], (1, 1, cfg.hidden_size)), noise_z)
    return LatentState(y=y, z=z, window_index=0)


def label_state(pt: dict, cfg: ModelConfig, label_tokens: np.ndarray,
                rng: np.random.Generator) -> LatentState:
    """Initial state for denoising: y embeds the (corrupted) target."""
    batch = np.asarray(label_tokens).shape[0]
    body = embed_label(pt, cfg, label_tokens)
    head = _broadcast_row(pt["state/y0"], batch, 1)
    y = ad.concat([head, body], axis=1)
    dtype = pt["state/z0"].value.dtype
    noise = ad.constant((rng.standard_normal((batch, cfg.seq_len + 1, cfg.hidden_size))
                         * STATE_NOISE_STD).astype(dtype))
    z = ad.add(ad.reshape(pt["state/z0"], (1, 1, cfg.hidden_size)), noise)
    return LatentState(y=y, z=z, window_index=0)


# ---------------------------------------------------------------------------
# recursion


def latent_step(pt: dict, cfg: ModelConfig, x: ad.Tensor, state: LatentState,
                app_index: int = 0) -> LatentState:
    """z <- phi(x + y + z); with single_z the y pathway does not exist."""
    if cfg.single_z:
        z = phi_apply(pt, cfg, ad.add(x, state.z), app_index)
    else:
        z = phi_apply(pt, cfg, ad.add(ad.add(x, state.y), state.z), app_index)
    return LatentState(y=state.y, z=z, window_index=state.window_index)


def answer_step(pt: dict, cfg: ModelConfig, state: LatentState,
                app_index: int = 0) -> LatentState:
    """y <- phi(y + z); identity under single_z."""
    if cfg.single_z:
        return state
    y = phi_apply(pt, cfg, ad.add(state.y, state.z), app_index)
    return LatentState(y=y, z=state.z, window_index=state.window_index)


def _cycle(pt, cfg, x, state, app_start):
    app = app_start
    for _ in range(cfg.inner_steps):
        state = latent_step(pt, cfg, x, state, app)
        app += 1
    if not cfg.single_z:
        state = answer_step(pt, cfg, state, app)
        app += 1
    return state, app


def run_cycles(pt: dict, cfg: ModelConfig, x: ad.Tensor, state: LatentState,
               cycles: int, app_start: int = 0) -> tuple[LatentState, int]:
    """A bare run of full cycles with no decode; gradient behaviour follows
    the ambient grad mode."""
    app = app_start
    for _ in range(cycles):
        state, app = _cycle(pt, cfg, x, state, app)
    return state, app


def decode_state(pt: dict, cfg: ModelConfig, state: LatentState) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-position logits (B, M, vocab) and halting logit (B,) from y (or z)."""
    carrier = state.z if cfg.single_z else state.y
    body = ad.slice_axis(carrier, 1, cfg.seq_len + 1, axis=1)
    logits = ad.matmul(body, pt["decode/w"])
    pool_w = ad.constant(np.full((1, cfg.seq_len), 1.0 / cfg.seq_len,
                                 dtype=carrier.value.dtype))
    pooled = ad.reshape(ad.matmul(pool_w, body), (body.shape[0], cfg.hidden_size))
    q = ad.add(ad.matmul(pooled, pt["q/w"]), pt["q/b"])
    return logits, ad.reshape(q, (body.shape[0],))


def run_window(pt: dict, cfg: ModelConfig, x: ad.Tensor, state: LatentState,
               warm_cycles: int, grad_cycles: int,
               with_gradient: bool = True) -> tuple[LatentState, ad.Tensor, ad.Tensor]:
    """warm_cycles without gradient, then grad_cycles carrying gradient,
    then decode.  Returns (state', logits, q_logit)."""
    if grad_cycles < 1:
        raise ModelError(f"need at least one gradient cycle, got {grad_cycles}")
    app = 0
    if warm_cycles > 0:
        with ad.no_grad():
            state, app = run_cycles(pt, cfg, x, state, warm_cycles, app)
    if with_gradient:
        state, app = run_cycles(pt, cfg, x, state, grad_cycles, app)
    else:
        with ad.no_grad():
            state, app = run_cycles(pt, cfg, x, state, grad_cycles, app)
    logits, q = decode_state(pt, cfg, state)
    state = LatentState(y=state.y, z=state.z, window_index=state.window_index + 1)
    return state, logits, q


def recursion_window(pt: dict, cfg: ModelConfig, x: ad.Tensor, state: LatentState,
                     with_gradient: bool = True):
    """The standard window: T-1 warm-up cycles, one gradient-bearing cycle."""
    return run_window(pt, cfg, x, state, cfg.cycles_per_window - 1, 1, with_gradient)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: Parameters,
                    ema: Parameters | None, metadata: dict | None = None) -> None:
    path = Path(path)
    named: dict[str, np.ndarray] = dict(params.arrays)
    if ema is not None:
        named.update({f"ema/{k}": v for k, v in ema.arrays.items()})
    order = sorted(named)
    header = {
        "config": cfg.to_dict(),
        "metadata": metadata or {},
        "arrays": [{"name": n, "shape": list(named[n].shape)} for n in order],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in order:
            f.write(np.ascontiguousarray(named[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, Parameters, Parameters | None, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    hlen, = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    offset = 12 + hlen
    plain: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        arr = arr.reshape(shape).astype(np.float32)
        name = spec["name"]
        if name.startswith("ema/"):
            ema[name[4:]] = arr
        else:
            plain[name] = arr
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    return (cfg, Parameters(plain), Parameters(ema) if ema else None,
            header.get("metadata", {}))
