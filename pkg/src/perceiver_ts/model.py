"""Latent-bottleneck encoder / query decoder forecaster.

Forward pass for a batch of windows ``(B, C, N*P)`` and one index plan per
window:

1. gather the input patches and RevIN-normalize them per channel,
2. embed each (channel, input patch) as ``patch @ W_input + CPE[c] + TPE[i]``,
3. encode (latent bottleneck by default, or one of the self-attention
   ablations),
4. build positional queries ``CPE[c] + TPE[j]`` for every target patch,
5. decode with cross-attention and project each query to ``P`` values,
6. undo the normalization.

Tokens are ordered channel-major, then by ascending patch index.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .formulation import IndexPlan, PatchGrid, RevinState, make_patch_grid, revin_normalize, standard_plan
from .nn import AttnBlockParams, attn_block, init_attn_block, trunc_normal
from .tensor import Tensor

ENCODERS = ("latent_bottleneck", "full_self_attn", "decoupled_self_attn")
DECODERS = ("query_crossattn", "direct_latent")
PE_MODES = ("shared", "separate")
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    n_channels: int
    lookback: int
    horizon: int
    patch_len: int
    d_model: int = 32
    d_latent: int = 32
    n_latents: int = 8
    n_self_layers: int = 3
    n_heads: int = 4
    encoder_variant: str = "latent_bottleneck"
    decoder_variant: str = "query_crossattn"
    pe_sharing: str = "shared"
    decoupled_layers: int = 1
    dropout: float = 0.0
    seed: int = 0
    # rows of the learned temporal position tables; None sizes them to exactly N
    max_patches: Optional[int] = 64

    @property
    def position_rows(self) -> int:
        return self.n_patches if self.max_patches is None else self.max_patches

    @property
    def n_patches(self) -> int:
        return (self.lookback + self.horizon) // self.patch_len

    @property
    def n_input_patches(self) -> int:
        return self.lookback // self.patch_len

    @property
    def grid(self) -> PatchGrid:
        return make_patch_grid(self.lookback + self.horizon, self.patch_len)

    def validate(self) -> "ModelConfig":
        errs = []
        for name in ("n_channels", "lookback", "horizon", "patch_len", "d_model", "d_latent",
                     "n_latents", "n_heads", "decoupled_layers"):
            if int(getattr(self, name)) < 1:
                errs.append(f"{name} must be >= 1")
        if self.n_self_layers < 0:
            errs.append("n_self_layers must be >= 0")
        if self.patch_len >= 1:
            if self.lookback % self.patch_len:
                errs.append(f"lookback {self.lookback} not divisible by patch_len {self.patch_len}")
            if self.horizon % self.patch_len:
                errs.append(f"horizon {self.horizon} not divisible by patch_len {self.patch_len}")
        if self.n_heads >= 1:
            if self.d_model % self.n_heads:
                errs.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
            if self.d_latent % self.n_heads:
                errs.append(f"d_latent {self.d_latent} not divisible by n_heads {self.n_heads}")
        if self.encoder_variant not in ENCODERS:
            errs.append(f"encoder_variant must be one of {ENCODERS}")
        if self.decoder_variant not in DECODERS:
            errs.append(f"decoder_variant must be one of {DECODERS}")
        elif self.decoder_variant == "direct_latent" and self.encoder_variant != "latent_bottleneck":
            errs.append("direct_latent decoding requires the latent_bottleneck encoder")
        if self.max_patches is not None and self.patch_len >= 1 and self.n_patches > self.max_patches:
            errs.append(f"{self.n_patches} patches exceed max_patches={self.max_patches}")
        if self.pe_sharing not in PE_MODES:
            errs.append(f"pe_sharing must be one of {PE_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("dropout must be in [0, 1)")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


class ModelParams:
    """Named trainable tensors. Attention blocks live under dotted prefixes."""

    def __init__(self, tensors: dict[str, Tensor], n_heads: int):
        self.tensors = dict(tensors)
        self.n_heads = n_heads

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def block(self, prefix: str) -> AttnBlockParams:
        n = len(prefix) + 1
        sub = {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}
        return AttnBlockParams.from_tensors(sub, self.n_heads)

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def count(self, prefix: Optional[str] = None) -> int:
        return sum(t.size for k, t in self.tensors.items() if prefix is None or k.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
                           self.n_heads)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: stored shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)


def init_params(cfg: ModelConfig) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D, DL, C, N, P = cfg.d_model, cfg.d_latent, cfg.n_channels, cfg.n_patches, cfg.patch_len
    h = cfg.n_heads
    out: dict[str, Tensor] = {}

    def w(name, *shape):
        out[name] = Tensor(trunc_normal(rng, shape), requires_grad=True)

    def block(name, q_dim, kv_dim):
        for k, t in init_attn_block(rng, q_dim, kv_dim, h).tensors().items():
            out[f"{name}.{k}"] = t

    w("w_input", P, D)
    w("w_output", D, P)
    w("e_temporal", cfg.position_rows, D)
    w("e_channel", C, D)
    if cfg.pe_sharing == "separate":
        w("q_temporal", cfg.position_rows, D)
        w("q_channel", C, D)
    if cfg.encoder_variant == "latent_bottleneck":
        w("z0", cfg.n_latents, DL)
        block("enc_in", DL, D)
        for k in range(cfg.n_self_layers):
            block(f"enc_self.{k}", DL, DL)
        if cfg.decoder_variant == "query_crossattn":
            block("enc_out", D, DL)
    elif cfg.encoder_variant == "full_self_attn":
        block("enc_full", D, D)
    else:
        for k in range(cfg.decoupled_layers):
            block(f"enc_time.{k}", D, D)
            block(f"enc_chan.{k}", D, D)
    block("dec", D, DL if cfg.decoder_variant == "direct_latent" else D)
    return ModelParams(out, h)


@dataclass
class ForwardTrace:
    h0: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    h1: Optional[np.ndarray] = None
    z: list[np.ndarray] = field(default_factory=list)
    encoder_attn: Optional[np.ndarray] = None
    decoder_attn: Optional[np.ndarray] = None
    revin: Optional[RevinState] = None


# -- stages -------------------------------------------------------------------


def plan_indices(plans: Union[IndexPlan, Sequence[IndexPlan]], n_patches: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack 0-based input/target patch indices of a batch of plans: ``(B, I)``, ``(B, J)``."""
    if isinstance(plans, IndexPlan):
        plans = [plans]
    for p in plans:
        if p.n_patches != n_patches:
            raise DimensionError(f"plan covers {p.n_patches} patches, model expects {n_patches}")
    sizes = {len(p.input_patches) for p in plans}
    if len(sizes) != 1:
        raise DimensionError(f"plans in one batch must share |I_patch|, got {sorted(sizes)}")
    return np.stack([p.input_index0 for p in plans]), np.stack([p.target_index0 for p in plans])


def gather_patches(windows: np.ndarray, index0: np.ndarray, patch_len: int) -> np.ndarray:
    """Concatenate the selected patches of each window: ``(B, C, T)`` -> ``(B, C, k*P)``."""
    B, C, Tn = windows.shape
    patches = windows.reshape(B, C, Tn // patch_len, patch_len)
    sel = np.take_along_axis(patches, index0[:, None, :, None], axis=2)
    return sel.reshape(B, C, -1)


def embed_inputs(x_norm: np.ndarray, input_idx: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Input tokens ``(B, C*I, D)`` from normalized input values ``(B, C, I*P)``."""
    B, C, width = x_norm.shape
    P, I = cfg.patch_len, input_idx.shape[1]
    if C != cfg.n_channels or width != I * P:
        raise DimensionError(f"embed_inputs: values {x_norm.shape} do not match C={cfg.n_channels}, "
                             f"|I_patch|={I}, P={P}")
    patches = Tensor(x_norm.reshape(B, C, I, P))
    tok = patches @ params["w_input"]                                   # (B, C, I, D)
    cpe = T.reshape(params["e_channel"], (C, 1, cfg.d_model))
    tpe = T.reshape(T.gather_rows(params["e_temporal"], input_idx), (B, 1, I, cfg.d_model))
    return T.reshape(tok + cpe + tpe, (B, C * I, cfg.d_model))


def build_queries(target_idx: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Positional queries ``(B, C*J, D)``; shared tables unless ``pe_sharing == 'separate'``."""
    B, J = target_idx.shape
    if J == 0:
        raise ConfigError("build_queries: empty target patch set")
    C, D = cfg.n_channels, cfg.d_model
    tname, cname = ("q_temporal", "q_channel") if cfg.pe_sharing == "separate" else ("e_temporal", "e_channel")
    cpe = T.reshape(params[cname], (C, 1, D))
    tpe = T.reshape(T.gather_rows(params[tname], target_idx), (B, 1, J, D))
    return T.reshape(cpe + tpe, (B, C * J, D))


def encode(h0: Tensor, params: ModelParams, cfg: ModelConfig, *, rng=None, write_back: bool = True):
    """Latent bottleneck: latents read the inputs, self-refine K times, inputs read the latents.

    Returns ``(H1, encoder_attn, zs)`` where ``encoder_attn`` is the stage-one
    latent-to-input map ``(B, M, C*I)`` and ``zs`` holds Z^(1)..Z^(K+1). With
    ``write_back=False`` the last stage is skipped and ``H1`` is None.
    """
    if cfg.encoder_variant != "latent_bottleneck":
        raise ConfigError(f"encode() needs the latent_bottleneck encoder, got {cfg.encoder_variant}")
    B = h0.shape[0]
    z = T.broadcast_to(params["z0"], (B, cfg.n_latents, cfg.d_latent))
    z, enc_map = attn_block(z, h0, params.block("enc_in"), dropout=cfg.dropout, rng=rng)
    zs = [z]
    for k in range(cfg.n_self_layers):
        z, _ = attn_block(z, z, params.block(f"enc_self.{k}"), dropout=cfg.dropout, rng=rng)
        zs.append(z)
    h1 = None
    if write_back:
        h1, _ = attn_block(h0, z, params.block("enc_out"), dropout=cfg.dropout, rng=rng)
    return h1, enc_map, zs


def encode_variant(h0: Tensor, params: ModelParams, cfg: ModelConfig, n_inputs: int, *, rng=None):
    """Self-attention encoders used as ablations.

    ``full_self_attn`` attends over all C*I tokens jointly. ``decoupled_self_attn``
    attends over the I patches within each channel, then over the C channels
    within each patch position. Returns ``(H1, attention_map_of_last_stage)``.
    """
    B, n, D = h0.shape
    C = cfg.n_channels
    if cfg.encoder_variant == "full_self_attn":
        return attn_block(h0, h0, params.block("enc_full"), dropout=cfg.dropout, rng=rng)
    if cfg.encoder_variant != "decoupled_self_attn":
        raise ConfigError(f"encode_variant() does not handle {cfg.encoder_variant}")
    h = T.reshape(h0, (B, C, n_inputs, D))
    amap = None
    for k in range(cfg.decoupled_layers):
        h, _ = attn_block(h, h, params.block(f"enc_time.{k}"), dropout=cfg.dropout, rng=rng)
        hc = T.transpose(h, (0, 2, 1, 3))                          # (B, I, C, D)
        hc, amap = attn_block(hc, hc, params.block(f"enc_chan.{k}"), dropout=cfg.dropout, rng=rng)
        h = T.transpose(hc, (0, 2, 1, 3))
    return T.reshape(h, (B, n, D)), amap


def decode(q0: Tensor, context: Tensor, params: ModelParams, cfg: ModelConfig, *, rng=None):
    """One cross-attention block from target queries to encoded context tokens."""
    return attn_block(q0, context, params.block("dec"), dropout=cfg.dropout, rng=rng)


def decode_direct_latent(q0: Tensor, z_final: Tensor, params: ModelParams, cfg: ModelConfig, *, rng=None):
    """Queries attend to the refined latents directly (no write-back to input tokens)."""
    if cfg.decoder_variant != "direct_latent":
        raise ConfigError("decode_direct_latent() needs decoder_variant='direct_latent'")
    return attn_block(q0, z_final, params.block("dec"), dropout=cfg.dropout, rng=rng)


def project_out(q1: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Map each query token to P values and lay them out as ``(B, C, J*P)``."""
    B, n, _ = q1.shape
    C = cfg.n_channels
    out = q1 @ params["w_output"]                                       # (B, C*J, P)
    return T.reshape(out, (B, C, (n // C) * cfg.patch_len))


def predict_from_inputs(x_in: np.ndarray, input_idx: np.ndarray, target_idx: np.ndarray,
                        params: ModelParams, cfg: ModelConfig, *, rng=None):
    """Shared path from input patch values ``(B, C, I*P)`` to predictions ``(B, C, J*P)``."""
    x_norm, state = revin_normalize(x_in)
    h0 = embed_inputs(x_norm, input_idx, params, cfg)
    zs: list[Tensor] = []
    enc_map = None
    if cfg.encoder_variant == "latent_bottleneck":
        h1, enc_map, zs = encode(h0, params, cfg, rng=rng, write_back=cfg.decoder_variant == "query_crossattn")
    else:
        h1, enc_map = encode_variant(h0, params, cfg, input_idx.shape[1], rng=rng)
    q0 = build_queries(target_idx, params, cfg)
    if cfg.decoder_variant == "direct_latent":
        q1, dec_map = decode_direct_latent(q0, zs[-1], params, cfg, rng=rng)
    else:
        q1, dec_map = decode(q0, h1, params, cfg, rng=rng)
    y = project_out(q1, params, cfg)
    pred = y * Tensor(state.sigma[..., None]) + Tensor(state.mu[..., None])
    trace = ForwardTrace(h0=h0.data, q0=q0.data, q1=q1.data, h1=None if h1 is None else h1.data,
                         z=[z.data for z in zs], encoder_attn=enc_map, decoder_attn=dec_map, revin=state)
    return pred, trace


def _batch(windows: np.ndarray, plans):
    windows = np.asarray(windows, dtype=np.float64)
    single = windows.ndim == 2
    if single:
        windows = windows[None]
    if isinstance(plans, IndexPlan):
        plans = [plans] * windows.shape[0]
    if len(plans) != windows.shape[0]:
        raise DimensionError(f"{len(plans)} plans for {windows.shape[0]} windows")
    return windows, list(plans), single


def forward(windows: np.ndarray, plans, params: ModelParams, cfg: ModelConfig, *, rng=None):
    """Predict the target patches of each window from its input patches.

    ``windows`` is ``(B, C, N*P)`` (or a single ``(C, N*P)``), ``plans`` one
    :class:`IndexPlan` or one per window. Target values in the window are
    never read. Returns ``(predictions, trace)`` with predictions a
    ``(B, C, J*P)`` tensor.
    """
    windows, plans, _ = _batch(windows, plans)
    N, P = cfg.n_patches, cfg.patch_len
    if windows.shape[1:] != (cfg.n_channels, N * P):
        raise DimensionError(f"windows {windows.shape} do not match C={cfg.n_channels}, N*P={N * P}")
    input_idx, target_idx = plan_indices(plans, N)
    x_in = gather_patches(windows, input_idx, P)
    return predict_from_inputs(x_in, input_idx, target_idx, params, cfg, rng=rng)


def forecast(x_past: np.ndarray, params: ModelParams, cfg: ModelConfig):
    """Standard forecasting entry point: lookback ``(B, C, L)`` -> horizon ``(B, C, H)``."""
    x_past = np.asarray(x_past, dtype=np.float64)
    single = x_past.ndim == 2
    if single:
        x_past = x_past[None]
    if x_past.shape[1:] != (cfg.n_channels, cfg.lookback):
        raise DimensionError(f"lookback {x_past.shape} does not match C={cfg.n_channels}, L={cfg.lookback}")
    plan = standard_plan(cfg.grid, cfg.lookback)
    B = x_past.shape[0]
    input_idx = np.broadcast_to(plan.input_index0, (B, cfg.n_input_patches))
    target_idx = np.broadcast_to(plan.target_index0, (B, cfg.n_patches - cfg.n_input_patches))
    with T.no_grad():
        pred, _ = predict_from_inputs(x_past, input_idx, target_idx, params, cfg)
    return pred.data[0] if single else pred.data


class Forecaster:
    """A config plus its parameters, with numpy-in / numpy-out prediction."""

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None):
        self.config = config.validate()
        self.params = init_params(config) if params is None else params

    def predict(self, windows: np.ndarray, plans) -> np.ndarray:
        with T.no_grad():
            pred, _ = forward(windows, plans, self.params, self.config)
        return pred.data[0] if np.ndim(windows) == 2 else pred.data

    def predict_with_trace(self, windows: np.ndarray, plans):
        with T.no_grad():
            pred, trace = forward(windows, plans, self.params, self.config)
        return pred.data, trace

    def forecast(self, x_past: np.ndarray) -> np.ndarray:
        return forecast(x_past, self.params, self.config)

    def copy(self) -> "Forecaster":
        return Forecaster(self.config, self.params.copy())

    def n_parameters(self) -> int:
        return self.params.count()


# -- checkpoints -------------------------------------------------------------

_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_checkpoint(path, config: ModelConfig, params: ModelParams, *, meta: Optional[dict] = None,
                    extra_arrays: Optional[dict[str, np.ndarray]] = None) -> None:
    """Write an ``.npz``-compatible archive: JSON header plus one ``.npy`` per array.

    Member timestamps are pinned so identical contents give identical bytes.
    """
    header = {"format": CHECKPOINT_FORMAT, "config": config.to_dict(), "meta": meta or {},
              "params": sorted(params.tensors), "extra": sorted(extra_arrays or {})}
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "header.json", json.dumps(header, sort_keys=True).encode())
        for prefix, arrays in (("param/", params.arrays()), ("extra/", extra_arrays or {})):
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                _write_member(zf, f"{prefix}{name}.npy", buf.getvalue())


def load_checkpoint(path):
    """Return ``(config, params, meta, extra_arrays)`` from :func:`save_checkpoint` output."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {header.get('format')}")

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        arrays = {k: read(f"param/{k}.npy") for k in header["params"]}
        extra = {k: read(f"extra/{k}.npy") for k in header["extra"]}
    config = ModelConfig.from_dict(header["config"])
    params = init_params(config)
    if set(arrays) != set(params.tensors):
        raise ConfigError(f"{path}: parameter names do not match the stored config")
    params.load_arrays(arrays)
    return config, params, header["meta"], extra
