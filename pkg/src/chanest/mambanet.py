"""Trainable channel estimator: attention front end, gated bidirectional
selective-scan block, and a residual CNN with bilinear super-resolution.

The pilot LS grid is flattened into a real two-channel token sequence; an
attention block mixes tokens along the sequence dimension, the scan block
propagates state in both directions with input-dependent gates, and the CNN
head refines and upsamples to the full slot.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from chanest import tensor as tz
from chanest.baseband import BasebandConfig, SlotGrid
from chanest.estimators import PilotLsGrid
from chanest.scan_backend import bidir_scan, bidir_scan_parallel, bidir_scan_vjp
from chanest.tensor import Parameter, Tensor


@dataclass(frozen=True)
class MambaNetConfig:
    """Shapes and knobs of the estimator network."""

    n_f: int = 228
    n_s: int = 14
    l_s: int = 4
    n_pilot: int = 4
    n_heads: int = 4
    c_spread: int = 24
    n_res_blocks: int = 7
    cnn_channels: int = 12
    head_kernel: tuple[int, int] = (96, 5)
    body_kernel: tuple[int, int] = (5, 5)
    eps: float = 1e-5
    token_order: str = "symbol_major"

    def __post_init__(self):
        if self.seq_len % self.n_heads:
            raise ValueError(f"seq_len {self.seq_len} not divisible by n_heads {self.n_heads}")
        if self.c_spread < 2:
            raise ValueError("c_spread must be at least 2")
        if self.token_order not in ("symbol_major", "subcarrier_major"):
            raise ValueError(f"unknown token order {self.token_order!r}")

    @property
    def pilot_rows(self) -> int:
        return self.n_f // self.l_s

    @property
    def seq_len(self) -> int:
        return self.n_pilot * self.n_f // self.l_s

    @classmethod
    def from_baseband(cls, bb: BasebandConfig, **overrides) -> "MambaNetConfig":
        fields = dict(n_f=bb.n_f, n_s=bb.n_s, l_s=bb.l_s, n_pilot=bb.n_pilot)
        fields["n_heads"] = overrides.pop("n_heads", bb.n_pilot)
        fields.update(overrides)
        return cls(**fields)


class MambaNetParams:
    """Ordered registry of uniquely named trainable tensors."""

    def __init__(self):
        self._by_name: dict[str, Parameter] = {}

    def register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._by_name:
            raise ValueError(f"parameter {name!r} registered twice")
        p = Parameter(name, data)
        self._by_name[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self._by_name)

    def names(self) -> list[str]:
        return list(self._by_name)

    def items(self):
        return self._by_name.items()

    def tensors(self) -> list[Parameter]:
        return list(self._by_name.values())

    def zero_grad(self) -> None:
        for p in self._by_name.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._by_name.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._by_name) - set(state)
        extra = set(state) - set(self._by_name)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, value in state.items():
            p = self._by_name[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name!r}: stored shape {value.shape} != expected {p.data.shape}"
                )
            p.data = value.copy()


def init_mambanet(cfg: MambaNetConfig, rng: np.random.Generator) -> MambaNetParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm scales."""
    params = MambaNetParams()
    seq = cfg.seq_len
    c = cfg.c_spread
    cc = cfg.cnn_channels

    def weight(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        params.register(name, rng.uniform(-bound, bound, shape))

    def bias(name, n):
        params.register(name, np.zeros(n))

    def norm(prefix, n):
        params.register(prefix + ".w", np.ones(n))
        params.register(prefix + ".b", np.zeros(n))

    weight("attn.w_qkv", (3 * seq, seq), seq)
    bias("attn.b_qkv", 3 * seq)
    weight("attn.w_out", (seq, seq), seq)
    bias("attn.b_out", seq)
    norm("attn.ln", seq)

    weight("mamba.w_in", (2, 2 * c), 2)
    bias("mamba.b_in", 2 * c)
    for gate in ("c", "a", "b", "g"):
        weight(f"mamba.w_{gate}", (c, c), c)
        bias(f"mamba.b_{gate}", c)
    weight("mamba.w_out", (c, 2), c)
    bias("mamba.b_out", 2)
    norm("mamba.ln", seq)

    kh, kw = cfg.body_kernel
    weight("cnn.conv_in.kernel", (kh, kw, 2, cc), kh * kw * 2)
    bias("cnn.conv_in.bias", cc)
    for i in range(cfg.n_res_blocks):
        for j in (1, 2):
            weight(f"cnn.res{i}.conv{j}.kernel", (kh, kw, cc, cc), kh * kw * cc)
            bias(f"cnn.res{i}.conv{j}.bias", cc)
    norm("cnn.ln", cfg.pilot_rows)
    hk, wk = cfg.head_kernel
    weight("cnn.head.kernel", (hk, wk, cc, 2), hk * wk * cc)
    bias("cnn.head.bias", 2)
    return params


# ---------------------------------------------------------------------------
# tokenization


def tokenize(ls, cfg: MambaNetConfig) -> np.ndarray:
    """Flatten the complex pilot grid into a real (seq, 2) token array.

    Accepts a PilotLsGrid or a complex array, optionally with a leading batch
    axis.  Symbol-major order concatenates the pilot-symbol columns; the
    subcarrier-major alternative groups tokens by subcarrier instead.
    """
    values = ls.values if isinstance(ls, PilotLsGrid) else np.asarray(ls, dtype=np.complex128)
    batched = values.ndim == 3
    vb = values if batched else values[None]
    if vb.shape[-2:] != (cfg.pilot_rows, cfg.n_pilot):
        raise ValueError(
            f"pilot grid shape {vb.shape[-2:]} does not match ({cfg.pilot_rows}, {cfg.n_pilot})"
        )
    if cfg.token_order == "symbol_major":
        flat = vb.transpose(0, 2, 1).reshape(vb.shape[0], cfg.seq_len)
    else:
        flat = vb.reshape(vb.shape[0], cfg.seq_len)
    tokens = np.stack([flat.real, flat.imag], axis=-1)
    return tokens if batched else tokens[0]


def detokenize(tokens: np.ndarray, cfg: MambaNetConfig) -> np.ndarray:
    """Inverse of :func:`tokenize`, back to the complex pilot grid."""
    tokens = np.asarray(tokens, dtype=np.float64)
    batched = tokens.ndim == 3
    tb = tokens if batched else tokens[None]
    flat = tb[..., 0] + 1j * tb[..., 1]
    if cfg.token_order == "symbol_major":
        values = flat.reshape(-1, cfg.n_pilot, cfg.pilot_rows).transpose(0, 2, 1)
    else:
        values = flat.reshape(-1, cfg.pilot_rows, cfg.n_pilot)
    return values if batched else values[0]


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tz.reshape(x, (1,) + x.shape), False
    return x, True


def _debatch(x: Tensor, batched: bool) -> Tensor:
    return x if batched else tz.reshape(x, x.shape[1:])


# ---------------------------------------------------------------------------
# attention block


def attention_block(x: Tensor, params: MambaNetParams, cfg: MambaNetConfig) -> Tensor:
    """Multi-head self-attention acting along the token sequence.

    The query/key/value projection mixes the sequence dimension (per real
    channel); heads split the sequence into contiguous blocks.  Residual add
    of the input, then layer normalization.
    """
    xb, batched = _as_batched(x)
    seq = cfg.seq_len
    heads = cfg.n_heads
    per_head = seq // heads

    qkv = tz.matmul(params["attn.w_qkv"], xb) + tz.reshape(params["attn.b_qkv"], (3 * seq, 1))
    q = tz.reshape(tz.narrow(qkv, -2, 0, seq), (-1, heads, per_head, 2))
    k = tz.reshape(tz.narrow(qkv, -2, seq, 2 * seq), (-1, heads, per_head, 2))
    v = tz.reshape(tz.narrow(qkv, -2, 2 * seq, 3 * seq), (-1, heads, per_head, 2))

    scores = tz.matmul(q, tz.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(cfg.pilot_rows))
    mixed = tz.matmul(tz.softmax_rows(scores), v)
    merged = tz.reshape(mixed, (-1, seq, 2))

    out = tz.matmul(params["attn.w_out"], merged) + tz.reshape(params["attn.b_out"], (seq, 1))
    normed = tz.layer_norm(out + xb, params["attn.ln.w"], params["attn.ln.b"], cfg.eps)
    return _debatch(normed, batched)


# ---------------------------------------------------------------------------
# gated bidirectional scan block


@dataclass
class ScanInputs:
    """Per-token gate (a), drive (b), and output gate (g) coefficients."""

    a: Tensor
    b: Tensor
    g: Tensor


def mamba_gates(x: Tensor, params: MambaNetParams, cfg: MambaNetConfig) -> ScanInputs:
    """Expand the two real channels and derive the scan coefficients."""
    c = cfg.c_spread
    z = tz.matmul(x, params["mamba.w_in"]) + params["mamba.b_in"]
    u_main = tz.narrow(z, -1, 0, c)
    u_gate = tz.narrow(z, -1, c, 2 * c)
    x_dc = tz.silu(tz.matmul(u_main, params["mamba.w_c"]) + params["mamba.b_c"])
    a = tz.sigmoid(tz.matmul(x_dc, params["mamba.w_a"]) + params["mamba.b_a"])
    b = tz.matmul(x_dc, params["mamba.w_b"]) + params["mamba.b_b"]
    g = tz.silu(tz.matmul(u_gate, params["mamba.w_g"]) + params["mamba.b_g"])
    return ScanInputs(a, b, g)


def _to_time_major(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr.transpose(1, 0, 2).reshape(arr.shape[1], -1))


def _from_time_major(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 2:
        return arr
    return arr.reshape(shape[1], shape[0], shape[2]).transpose(1, 0, 2)


def bidirectional_scan(a: Tensor, b: Tensor, mode: str = "sequential") -> Tensor:
    """Sum of forward and backward first-order recurrences over the tokens.

    ``mode="sequential"`` runs the stepwise kernel; ``"parallel"`` the
    associative-combine formulation.  Both are differentiable and agree to
    floating-point accumulation error.
    """
    a, b = tz._as_tensor(a), tz._as_tensor(b)
    if a.shape != b.shape or a.ndim not in (2, 3):
        raise ValueError(f"scan inputs must share a 2-d/3-d shape, got {a.shape} vs {b.shape}")
    if not np.all(np.isfinite(a.data)) or not np.all(np.isfinite(b.data)):
        raise ValueError("scan inputs must be finite")
    if a.data.min() < 0.0 or a.data.max() > 1.0:
        raise ValueError("gate coefficients must lie in (0, 1)")
    at = _to_time_major(a.data)
    bt = _to_time_major(b.data)
    if mode == "sequential":
        hf, hb = bidir_scan(at, bt)
    elif mode == "parallel":
        hf, hb = bidir_scan_parallel(at, bt)
    else:
        raise ValueError(f"unknown scan mode {mode!r}")
    out = _from_time_major(hf + hb, a.shape)

    def vjp(g):
        gt = _to_time_major(np.ascontiguousarray(g))
        da, db = bidir_scan_vjp(at, hf, hb, gt)
        return _from_time_major(da, a.shape), _from_time_major(db, a.shape)

    return tz._make(out, (a, b), vjp)


def scan_sequential(s: ScanInputs) -> Tensor:
    return bidirectional_scan(s.a, s.b, mode="sequential")


def scan_parallel(s: ScanInputs) -> Tensor:
    return bidirectional_scan(s.a, s.b, mode="parallel")


def mamba_block(x: Tensor, params: MambaNetParams, cfg: MambaNetConfig) -> Tensor:
    """Gated scan over the tokens, projected back to two channels, with a
    residual add and layer normalization."""
    xb, batched = _as_batched(x)
    s = mamba_gates(xb, params, cfg)
    h = scan_sequential(s)
    y = tz.matmul(s.g * h, params["mamba.w_out"]) + params["mamba.b_out"]
    normed = tz.layer_norm(y + xb, params["mamba.ln.w"], params["mamba.ln.b"], cfg.eps)
    return _debatch(normed, batched)


# ---------------------------------------------------------------------------
# residual CNN with upsampling


def refine_head(y: Tensor, params: MambaNetParams, cfg: MambaNetConfig) -> Tensor:
    """Reshape tokens to the pilot grid, refine with residual conv blocks,
    upsample bilinearly to the full slot, and project to two channels."""
    yb, batched = _as_batched(y)
    if cfg.token_order == "symbol_major":
        grid = tz.swapaxes(tz.reshape(yb, (-1, cfg.n_pilot, cfg.pilot_rows, 2)), 1, 2)
    else:
        grid = tz.reshape(yb, (-1, cfg.pilot_rows, cfg.n_pilot, 2))

    t0 = tz.conv2d_same(grid, params["cnn.conv_in.kernel"], params["cnn.conv_in.bias"])
    t = t0
    for i in range(cfg.n_res_blocks):
        inner = tz.relu(tz.conv2d_same(t, params[f"cnn.res{i}.conv1.kernel"], params[f"cnn.res{i}.conv1.bias"]))
        t = t + tz.conv2d_same(inner, params[f"cnn.res{i}.conv2.kernel"], params[f"cnn.res{i}.conv2.bias"])

    stacked = t0 + t
    flat = tz.reshape(stacked, (-1, cfg.pilot_rows, cfg.n_pilot * cfg.cnn_channels))
    normed = tz.layer_norm(flat, params["cnn.ln.w"], params["cnn.ln.b"], cfg.eps)
    features = tz.reshape(normed, (-1, cfg.pilot_rows, cfg.n_pilot, cfg.cnn_channels))

    up = tz.bilinear_resize(features, cfg.n_f, cfg.n_s)
    out = tz.conv2d_same(up, params["cnn.head.kernel"], params["cnn.head.bias"])
    return _debatch(out, batched)


# ---------------------------------------------------------------------------
# full model


def forward_tokens(x: Tensor, params: MambaNetParams, cfg: MambaNetConfig) -> Tensor:
    """Token sequence (optionally batched) to (n_f, n_s, 2) estimates."""
    y = attention_block(x, params, cfg)
    y = mamba_block(y, params, cfg)
    return refine_head(y, params, cfg)


def forward(ls: PilotLsGrid, params: MambaNetParams, cfg: MambaNetConfig) -> SlotGrid:
    """Full-slot channel estimate for one pilot LS grid."""
    tokens = Tensor(tokenize(ls, cfg))
    out = forward_tokens(tokens, params, cfg).data
    return SlotGrid(out[..., 0] + 1j * out[..., 1], kind="channel")


def infer_batch(ls_values: np.ndarray, params: MambaNetParams, cfg: MambaNetConfig) -> np.ndarray:
    """Inference on stacked pilot grids (n, rows, n_pilot) -> (n, n_f, n_s)."""
    with tz.no_grad():
        tokens = Tensor(tokenize(ls_values, cfg))
        out = forward_tokens(tokens, params, cfg).data
    return out[..., 0] + 1j * out[..., 1]


# ---------------------------------------------------------------------------
# accounting and checkpoints


def count_parameters(params: MambaNetParams) -> int:
    return sum(p.size for p in params.tensors())


def parameter_breakdown(params: MambaNetParams) -> dict[str, int]:
    """Element counts grouped by the top-level name segment."""
    groups: dict[str, int] = {}
    for name, p in params.items():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + p.size
    return groups


def attention_projection_count(cfg: MambaNetConfig) -> int:
    """Closed-form size of the query/key/value projection, the term that
    grows quadratically with the subcarrier count."""
    seq = cfg.seq_len
    return 3 * seq * seq + 3 * seq


def scaling_report(cfg: MambaNetConfig) -> dict[str, float]:
    """How the dominant parameter term scales when n_f doubles."""
    here = attention_projection_count(cfg)
    doubled = attention_projection_count(replace(cfg, n_f=2 * cfg.n_f))
    return {
        "attention_projection": here,
        "attention_projection_2x": doubled,
        "ratio": doubled / here,
        "exponent": float(np.log2(doubled / here)),
    }


def save_checkpoint(path, params: MambaNetParams, cfg: MambaNetConfig, extra: dict | None = None):
    """Serialize parameters with the config echoed into the header."""
    header = {"kind": "mambanet", "model": _config_header(cfg)}
    if extra:
        header.update(extra)
    tz.save_parameters(path, dict(params.items()), header)


def load_checkpoint(path) -> tuple[MambaNetParams, MambaNetConfig, dict]:
    """Load a checkpoint, validating stored shapes against its config."""
    header, state = tz.load_parameters(path)
    if header.get("kind") != "mambanet":
        raise ValueError(f"{path}: not an estimator checkpoint")
    cfg = _config_from_header(header["model"])
    params = init_mambanet(cfg, np.random.default_rng(0))
    params.load_state(state)
    return params, cfg, header


def _config_header(cfg: MambaNetConfig) -> dict:
    d = asdict(cfg)
    d["head_kernel"] = list(cfg.head_kernel)
    d["body_kernel"] = list(cfg.body_kernel)
    return d


def _config_from_header(d: dict) -> MambaNetConfig:
    d = dict(d)
    d["head_kernel"] = tuple(d["head_kernel"])
    d["body_kernel"] = tuple(d["body_kernel"])
    return MambaNetConfig(**d)
