"""Forward computations: speech encoder, phoneme encoder, cross-attention,
conditioning, fusion, projection head, and the auxiliary L1/L2 classifier.

All functions are pure in (params, inputs). Parameters live in flat
name->array dicts; callers wrap them in Tensors (choosing which require
gradients) and pass the wrapped dict `P`. Batched variants carry explicit
per-item lengths; padded positions are neutralized with additive attention
masks and masked state updates, never by relying on zero padding alone.

Attention orientation in cross_attention: query is the acoustic context,
key and value are the encoded canonical phonemes, so the output has one row
per frame and can be concatenated with the context for the CTC head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, InputError
from .tensor import Tensor

NEG_MASK = -1e9
LN_EPS = 1e-5

CONDITIONING_MODES = ("none", "onehot-l2", "onehot-l1", "onehot-l1l2", "aux")


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    stride: int


@dataclass
class EncoderDims:
    d_in: int
    d_model: int
    conv: tuple[ConvSpec, ...]
    n_blocks: int
    n_heads: int
    d_ffn: int

    def validate(self, who: str) -> None:
        dims = [self.d_in, self.d_model, self.n_blocks, self.n_heads, self.d_ffn]
        if any(d < 1 for d in dims):
            raise ConfigError(f"{who}: dims must be positive, got {dims}")
        if not self.conv:
            raise ConfigError(f"{who}: need at least one conv layer")
        for c in self.conv:
            if c.channels < 1 or c.kernel < 1 or c.stride < 1:
                raise ConfigError(f"{who}: bad conv spec {c}")
        if self.conv[-1].channels != self.d_model:
            raise ConfigError(f"{who}: last conv channels {self.conv[-1].channels} != d_model {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"{who}: d_model {self.d_model} not divisible by {self.n_heads} heads")

    @property
    def stride_product(self) -> int:
        p = 1
        for c in self.conv:
            p *= c.stride
        return p


@dataclass
class ModelConfig:
    num_symbols: int
    d0: int
    l1_classes: tuple[str, ...]
    l2_classes: tuple[str, ...]
    d_model: int = 64
    d_emb: int = 32
    d_h: int = 32
    d_attn: int = 64
    d_eps: int = 64
    d_proj: int = 64
    conv: tuple[ConvSpec, ...] = (ConvSpec(64, 3, 2), ConvSpec(64, 3, 2))
    n_blocks: int = 2
    n_heads: int = 2
    d_ffn: int = 128
    conditioning: str = "none"
    phoneme_encoder: bool = True

    def validate(self) -> None:
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"unknown conditioning mode {self.conditioning!r}; expected one of {CONDITIONING_MODES}")
        if self.num_symbols < 1:
            raise ConfigError(f"num_symbols must be >= 1, got {self.num_symbols}")
        for name in ("d0", "d_emb", "d_h", "d_attn", "d_eps", "d_proj"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        # empty class lists are allowed: the conditioning block then has
        # width zero and the model degenerates to its unconditioned twin
        self.encoder_dims().validate("speech encoder")

    def encoder_dims(self) -> EncoderDims:
        return EncoderDims(self.d0, self.d_model, self.conv, self.n_blocks, self.n_heads, self.d_ffn)

    @property
    def n_classes(self) -> int:
        return self.num_symbols + 1  # trailing blank

    @property
    def blank_id(self) -> int:
        return self.num_symbols

    @property
    def d_cond(self) -> int:
        if self.conditioning == "none":
            return 0
        if self.conditioning == "onehot-l2":
            return len(self.l2_classes)
        if self.conditioning == "onehot-l1":
            return len(self.l1_classes)
        if self.conditioning == "onehot-l1l2":
            return len(self.l1_classes) + len(self.l2_classes)
        return self.d_eps

    @property
    def d_fused(self) -> int:
        d = self.d_model + self.d_cond
        if self.phoneme_encoder:
            d += self.d_attn
        return d


def full_scale_config(num_symbols: int, d0: int, l1_classes, l2_classes) -> ModelConfig:
    """Reference dimensions of the original system; not used by the tests."""
    return ModelConfig(
        num_symbols=num_symbols,
        d0=d0,
        l1_classes=tuple(l1_classes),
        l2_classes=tuple(l2_classes),
        d_model=1024,
        d_emb=82,
        d_h=512,
        d_attn=1024,
        d_eps=1024,
        d_proj=1024,
        conv=(ConvSpec(512, 3, 2), ConvSpec(1024, 3, 2)),
        n_blocks=24,
        n_heads=16,
        d_ffn=4096,
        conditioning="aux",
    )


@dataclass
class AuxConfig:
    d0: int
    l1_classes: tuple[str, ...]
    l2_classes: tuple[str, ...]
    d_model: int = 64
    d_eps: int = 64
    conv: tuple[ConvSpec, ...] = (ConvSpec(64, 3, 2), ConvSpec(64, 3, 2))
    n_blocks: int = 1
    n_heads: int = 2
    d_ffn: int = 128

    def validate(self) -> None:
        if not self.l1_classes or not self.l2_classes:
            raise ConfigError("auxiliary model needs nonempty L1 and L2 class lists")
        if self.d_eps < 1:
            raise ConfigError("d_eps must be positive")
        self.encoder_dims().validate("aux encoder")

    def encoder_dims(self) -> EncoderDims:
        return EncoderDims(self.d0, self.d_model, self.conv, self.n_blocks, self.n_heads, self.d_ffn)


# ---------------------------------------------------------------------------
# parameter construction


def _encoder_param_shapes(dims: EncoderDims, prefix: str) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    d_in = dims.d_in
    for i, c in enumerate(dims.conv):
        shapes[f"{prefix}conv{i}.w"] = (c.kernel * d_in, c.channels)
        shapes[f"{prefix}conv{i}.b"] = (c.channels,)
        d_in = c.channels
    d = dims.d_model
    for i in range(dims.n_blocks):
        b = f"{prefix}block{i}."
        shapes[b + "ln1.g"] = (d,)
        shapes[b + "ln1.b"] = (d,)
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[b + f"attn.{nm}"] = (d, d)
        # no key bias: it cancels inside the row softmax
        for nm in ("bq", "bv", "bo"):
            shapes[b + f"attn.{nm}"] = (d,)
        shapes[b + "ln2.g"] = (d,)
        shapes[b + "ln2.b"] = (d,)
        shapes[b + "ffn.w1"] = (d, dims.d_ffn)
        shapes[b + "ffn.b1"] = (dims.d_ffn,)
        shapes[b + "ffn.w2"] = (dims.d_ffn, d)
        shapes[b + "ffn.b2"] = (d,)
    shapes[prefix + "ln.g"] = (d,)
    shapes[prefix + "ln.b"] = (d,)
    return shapes


def mdd_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = _encoder_param_shapes(cfg.encoder_dims(), "enc.")
    if cfg.phoneme_encoder:
        shapes["phon.emb"] = (cfg.num_symbols, cfg.d_emb)
        for d in ("f", "b"):
            shapes[f"phon.{d}.wx"] = (cfg.d_emb, 4 * cfg.d_h)
            shapes[f"phon.{d}.wh"] = (cfg.d_h, 4 * cfg.d_h)
            shapes[f"phon.{d}.b"] = (4 * cfg.d_h,)
        shapes["xattn.wq"] = (cfg.d_model, cfg.d_attn)
        shapes["xattn.bq"] = (cfg.d_attn,)
        shapes["xattn.wk"] = (2 * cfg.d_h, cfg.d_attn)  # no key bias, see above
        shapes["xattn.wv"] = (2 * cfg.d_h, cfg.d_attn)
        shapes["xattn.bv"] = (cfg.d_attn,)
    shapes["proj.w1"] = (cfg.d_fused, cfg.d_proj)
    shapes["proj.b1"] = (cfg.d_proj,)
    shapes["head.w"] = (cfg.d_proj, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def aux_param_shapes(acfg: AuxConfig) -> dict[str, tuple]:
    shapes = _encoder_param_shapes(acfg.encoder_dims(), "aux.enc.")
    shapes["aux.proj.w"] = (acfg.d_model, acfg.d_eps)
    shapes["aux.proj.b"] = (acfg.d_eps,)
    shapes["aux.head_l1.w"] = (acfg.d_eps, len(acfg.l1_classes))
    shapes["aux.head_l1.b"] = (len(acfg.l1_classes),)
    shapes["aux.head_l2.w"] = (acfg.d_eps, len(acfg.l2_classes))
    shapes["aux.head_l2.b"] = (len(acfg.l2_classes),)
    return shapes


def _semi_orthogonal(gen: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix with orthonormal rows or columns, whichever fit."""
    g = gen.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def _conv_weight_kernels(dims: EncoderDims, prefix: str) -> dict[str, int]:
    return {f"{prefix}conv{i}.w": c.kernel for i, c in enumerate(dims.conv)}


def init_params(shapes: dict[str, tuple], seed: int, conv_kernels: dict[str, int] | None = None) -> dict[str, np.ndarray]:
    """Matrices: uniform(+-1/sqrt(fan_in)); biases zero; layer-norm gain one.

    Conv weights named in conv_kernels get a delta layout instead: the center
    tap is a scaled semi-orthogonal matrix and the other taps are zero. The
    conv stack is frozen by default during training, and a random frozen
    projection discards information; this one starts lossless.
    """
    params: dict[str, np.ndarray] = {}
    conv_kernels = conv_kernels or {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name in conv_kernels:
            gen = rngmod.stream(seed, f"init/{name}")
            k = conv_kernels[name]
            d_in = shape[0] // k
            w = np.zeros(shape)
            # sqrt(2) offsets the variance the following relu removes
            w[d_in * (k // 2) : d_in * (k // 2 + 1)] = math.sqrt(2.0) * _semi_orthogonal(gen, d_in, shape[1])
            params[name] = w
        else:
            gen = rngmod.stream(seed, f"init/{name}")
            params[name] = rngmod.init_uniform(gen, shape, fan_in=shape[0])
    return params


def init_mdd_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    cfg.validate()
    return init_params(mdd_param_shapes(cfg), seed, _conv_weight_kernels(cfg.encoder_dims(), "enc."))


def init_aux_params(acfg: AuxConfig, seed: int) -> dict[str, np.ndarray]:
    acfg.validate()
    return init_params(aux_param_shapes(acfg), seed, _conv_weight_kernels(acfg.encoder_dims(), "aux.enc."))


def wrap_params(params: dict[str, np.ndarray], trainable=None) -> dict[str, Tensor]:
    """Tensor views of the arrays; `trainable` limits which require gradients.

    trainable=None marks everything trainable; pass a set (possibly empty)
    to freeze the rest. Frozen tensors are never recorded on the tape.
    """
    out = {}
    for name, arr in params.items():
        rg = True if trainable is None else name in trainable
        out[name] = Tensor(arr, requires_grad=rg)
    return out


# ---------------------------------------------------------------------------
# building blocks


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = T.sub(x, mu)
    var = T.mean(T.mul(xc, xc), axis=-1, keepdims=True)
    inv = T.powc(T.add(var, Tensor(LN_EPS)), -0.5)
    return T.add(T.mul(T.mul(xc, inv), g), b)


def _conv_out_length(length: int, stride: int) -> int:
    return -(-length // stride)  # ceil


def _unfold_indices(t_out: int, kernel: int, stride: int) -> np.ndarray:
    base = np.arange(t_out) * stride
    return (base[:, None] + np.arange(kernel)[None, :]).ravel()


def conv_stack(P: dict[str, Tensor], dims: EncoderDims, x: Tensor, lengths: np.ndarray, prefix: str) -> tuple[Tensor, np.ndarray]:
    """Strided temporal convolutions with relu; x is B x T x D."""
    cur = x
    cur_len = lengths.copy()
    for i, c in enumerate(dims.conv):
        t_in = cur.shape[1]
        t_out = _conv_out_length(t_in, c.stride)
        t_need = (t_out - 1) * c.stride + c.kernel
        if t_need > t_in:
            pad = T.expand(Tensor(np.zeros((1, 1, cur.shape[2]))), (cur.shape[0], t_need - t_in, cur.shape[2]))
            cur = T.concat([cur, pad], axis=1)
        gathered = T.take(cur, _unfold_indices(t_out, c.kernel, c.stride), axis=1)
        windows = T.reshape(gathered, (cur.shape[0], t_out, c.kernel * cur.shape[2]))
        cur = T.relu(T.add(T.matmul(windows, P[f"{prefix}conv{i}.w"]), P[f"{prefix}conv{i}.b"]))
        cur_len = np.ceil(cur_len / c.stride).astype(np.int64)
    return cur, cur_len


def transformer_stack(P: dict[str, Tensor], dims: EncoderDims, x: Tensor, lengths: np.ndarray, prefix: str) -> Tensor:
    bsz, t, d = x.shape
    h = dims.n_heads
    dh = d // h
    key_mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
    additive = Tensor(NEG_MASK * (1.0 - key_mask)[:, None, None, :])  # B x 1 x 1 x T
    x = T.add(x, Tensor(sinusoidal_positions(t, d)))
    for i in range(dims.n_blocks):
        b = f"{prefix}block{i}."
        normed = layer_norm(x, P[b + "ln1.g"], P[b + "ln1.b"])

        def heads(w, bias=None):
            y = T.matmul(normed, P[b + f"attn.{w}"])
            if bias is not None:
                y = T.add(y, P[b + f"attn.{bias}"])
            return T.swapaxes(T.reshape(y, (bsz, t, h, dh)), 1, 2)  # B x h x T x dh

        q = heads("wq", "bq")
        k = heads("wk")
        v = heads("wv", "bv")
        scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
        weights = T.softmax(T.add(scores, additive), axis=-1)
        ctx = T.reshape(T.swapaxes(T.matmul(weights, v), 1, 2), (bsz, t, d))
        attn_out = T.add(T.matmul(ctx, P[b + "attn.wo"]), P[b + "attn.bo"])
        x = T.add(x, attn_out)

        normed2 = layer_norm(x, P[b + "ln2.g"], P[b + "ln2.b"])
        inner = T.relu(T.add(T.matmul(normed2, P[b + "ffn.w1"]), P[b + "ffn.b1"]))
        x = T.add(x, T.add(T.matmul(inner, P[b + "ffn.w2"]), P[b + "ffn.b2"]))
    return layer_norm(x, P[prefix + "ln.g"], P[prefix + "ln.b"])


@dataclass
class SpeechEncoding:
    latent: Tensor  # T x D_model (or B x T x D_model batched)
    context: Tensor
    frame_length: int | np.ndarray


def speech_encode_batch(P: dict[str, Tensor], dims: EncoderDims, feats: Tensor, lengths: np.ndarray, prefix: str = "enc.") -> SpeechEncoding:
    if feats.ndim != 3:
        raise DimensionError(f"batched features must be B x T0 x D0, got {feats.shape}")
    if int(lengths.min()) < dims.stride_product:
        raise InputError(f"need at least {dims.stride_product} frames, got {int(lengths.min())}")
    if feats.shape[2] != dims.d_in:
        raise DimensionError(f"feature dim {feats.shape[2]} != configured d0 {dims.d_in}")
    latent, out_len = conv_stack(P, dims, feats, lengths, prefix)
    context = transformer_stack(P, dims, latent, out_len, prefix)
    return SpeechEncoding(latent=latent, context=context, frame_length=out_len)


def speech_encode(P: dict[str, Tensor], cfg: ModelConfig, features: Tensor) -> SpeechEncoding:
    """Single utterance: features T0 x D0 to context T x D_model."""
    if features.ndim != 2:
        raise DimensionError(f"features must be T0 x D0, got {features.shape}")
    enc = speech_encode_batch(
        P, cfg.encoder_dims(), T.reshape(features, (1,) + features.shape), np.array([features.shape[0]])
    )
    t = int(enc.frame_length[0])
    return SpeechEncoding(
        latent=T.reshape(enc.latent, enc.latent.shape[1:]),
        context=T.reshape(enc.context, enc.context.shape[1:]),
        frame_length=t,
    )


@dataclass
class PhonemeEncoding:
    embedded: Tensor  # L x D_emb (or B x L x D_emb)
    contextual: Tensor  # L x 2*D_h


def _lstm_direction(P: dict[str, Tensor], pre: str, emb: Tensor, step_mask: np.ndarray, reverse: bool) -> Tensor:
    bsz, length, _ = emb.shape
    d_h = P[pre + "wh"].shape[0]
    xproj = T.add(T.matmul(emb, P[pre + "wx"]), P[pre + "b"])  # B x L x 4H
    h = Tensor(np.zeros((bsz, d_h)))
    c = Tensor(np.zeros((bsz, d_h)))
    order = range(length - 1, -1, -1) if reverse else range(length)
    outputs: list[Tensor | None] = [None] * length
    for t_i in order:
        gates = T.add(xproj[:, t_i], T.matmul(h, P[pre + "wh"]))
        i_g = T.sigmoid(gates[:, 0 * d_h : 1 * d_h])
        f_g = T.sigmoid(gates[:, 1 * d_h : 2 * d_h])
        g_g = T.tanh(gates[:, 2 * d_h : 3 * d_h])
        o_g = T.sigmoid(gates[:, 3 * d_h : 4 * d_h])
        c_new = T.add(T.mul(f_g, c), T.mul(i_g, g_g))
        h_new = T.mul(o_g, T.tanh(c_new))
        m = Tensor(step_mask[:, t_i : t_i + 1])
        not_m = Tensor(1.0 - step_mask[:, t_i : t_i + 1])
        # padded steps freeze the state, so right padding cannot leak in
        h = T.add(T.mul(m, h_new), T.mul(not_m, h))
        c = T.add(T.mul(m, c_new), T.mul(not_m, c))
        outputs[t_i] = T.reshape(h, (bsz, 1, d_h))
    return T.concat(outputs, axis=1)


def phoneme_encode_batch(P: dict[str, Tensor], cfg: ModelConfig, ids: np.ndarray, lengths: np.ndarray) -> PhonemeEncoding:
    if not cfg.phoneme_encoder:
        raise ContractError("phoneme encoder is disabled in this configuration")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= cfg.num_symbols:
        raise InputError(f"canonical ids out of range [0, {cfg.num_symbols})")
    emb = T.take(P["phon.emb"], ids, axis=0)  # B x L x D_emb
    step_mask = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    fwd = _lstm_direction(P, "phon.f.", emb, step_mask, reverse=False)
    bwd = _lstm_direction(P, "phon.b.", emb, step_mask, reverse=True)
    return PhonemeEncoding(embedded=emb, contextual=T.concat([fwd, bwd], axis=-1))


def phoneme_encode(P: dict[str, Tensor], cfg: ModelConfig, canonical_ids: list[int]) -> PhonemeEncoding:
    ids = np.asarray([canonical_ids], dtype=np.intp)
    enc = phoneme_encode_batch(P, cfg, ids, np.array([len(canonical_ids)]))
    return PhonemeEncoding(
        embedded=T.reshape(enc.embedded, enc.embedded.shape[1:]),
        contextual=T.reshape(enc.contextual, enc.contextual.shape[1:]),
    )


def cross_attention_batch(P: dict[str, Tensor], context: Tensor, phon: Tensor, phon_lengths: np.ndarray) -> Tensor:
    bsz, t, _ = context.shape
    length = phon.shape[1]
    d_attn = P["xattn.wq"].shape[1]
    q = T.add(T.matmul(context, P["xattn.wq"]), P["xattn.bq"])  # B x T x Da
    k = T.matmul(phon, P["xattn.wk"])  # B x L x Da
    v = T.add(T.matmul(phon, P["xattn.wv"]), P["xattn.bv"])
    key_mask = (np.arange(length)[None, :] < phon_lengths[:, None]).astype(np.float64)
    additive = Tensor(NEG_MASK * (1.0 - key_mask)[:, None, :])  # B x 1 x L
    scores = T.scale(T.matmul(q, T.swapaxes(k, 1, 2)), 1.0 / math.sqrt(d_attn))
    weights = T.softmax(T.add(scores, additive), axis=-1)
    return T.matmul(weights, v)  # B x T x Da


def cross_attention(P: dict[str, Tensor], context: Tensor, phon: Tensor) -> Tensor:
    """Single utterance: context T x D_model, phon L x 2*D_h -> T x D_attn."""
    out = cross_attention_batch(
        P,
        T.reshape(context, (1,) + context.shape),
        T.reshape(phon, (1,) + phon.shape),
        np.array([phon.shape[0]]),
    )
    return T.reshape(out, out.shape[1:])


def one_hot_conditioning(cfg: ModelConfig, l1: str | None = None, l2: str | None = None) -> np.ndarray:
    """Concatenated one-hot blocks per the conditioning mode; L1 block first."""
    mode = cfg.conditioning
    if mode == "none":
        return np.zeros(0)
    if mode == "aux":
        raise ConfigError("aux conditioning supplies an embedding, not a one-hot vector")
    blocks = []
    if mode in ("onehot-l1", "onehot-l1l2"):
        v = np.zeros(len(cfg.l1_classes))
        if cfg.l1_classes:  # zero-width block when no classes are configured
            if l1 not in cfg.l1_classes:
                raise ConfigError(f"unknown L1 class {l1!r}; configured {list(cfg.l1_classes)}")
            v[cfg.l1_classes.index(l1)] = 1.0
        blocks.append(v)
    if mode in ("onehot-l2", "onehot-l1l2"):
        v = np.zeros(len(cfg.l2_classes))
        if cfg.l2_classes:
            if l2 not in cfg.l2_classes:
                raise ConfigError(f"unknown L2 class {l2!r}; configured {list(cfg.l2_classes)}")
            v[cfg.l2_classes.index(l2)] = 1.0
        blocks.append(v)
    return np.concatenate(blocks)


@dataclass
class AuxOutput:
    embedding: Tensor  # D_eps (or B x D_eps)
    l1_logits: Tensor
    l2_logits: Tensor


def aux_forward_batch(P: dict[str, Tensor], acfg: AuxConfig, feats: Tensor, lengths: np.ndarray) -> AuxOutput:
    enc = speech_encode_batch(P, acfg.encoder_dims(), feats, lengths, prefix="aux.enc.")
    out_len = enc.frame_length
    t = enc.context.shape[1]
    mask = (np.arange(t)[None, :] < out_len[:, None]).astype(np.float64)
    summed = T.sum_(T.mul(enc.context, Tensor(mask[:, :, None])), axis=1)  # B x D
    pooled = T.mul(summed, Tensor((1.0 / out_len.astype(np.float64))[:, None]))
    eps = T.tanh(T.add(T.matmul(pooled, P["aux.proj.w"]), P["aux.proj.b"]))
    l1_logits = T.add(T.matmul(eps, P["aux.head_l1.w"]), P["aux.head_l1.b"])
    l2_logits = T.add(T.matmul(eps, P["aux.head_l2.w"]), P["aux.head_l2.b"])
    return AuxOutput(embedding=eps, l1_logits=l1_logits, l2_logits=l2_logits)


def aux_forward(P: dict[str, Tensor], acfg: AuxConfig, features: Tensor) -> AuxOutput:
    out = aux_forward_batch(P, acfg, T.reshape(features, (1,) + features.shape), np.array([features.shape[0]]))
    return AuxOutput(
        embedding=T.reshape(out.embedding, out.embedding.shape[1:]),
        l1_logits=T.reshape(out.l1_logits, out.l1_logits.shape[1:]),
        l2_logits=T.reshape(out.l2_logits, out.l2_logits.shape[1:]),
    )


@dataclass
class FusedRepresentation:
    fused: Tensor  # T x D_F (or B x T x D_F)


def fuse_batch(context: Tensor, attn: Tensor | None, cond: Tensor | None) -> FusedRepresentation:
    parts = [context]
    if attn is not None:
        if attn.shape[:2] != context.shape[:2]:
            raise DimensionError(f"attention frames {attn.shape} do not match context {context.shape}")
        parts.append(attn)
    if cond is not None and cond.shape[-1] > 0:
        tiled = T.expand(T.reshape(cond, (cond.shape[0], 1, cond.shape[1])), (context.shape[0], context.shape[1], cond.shape[1]))
        parts.append(tiled)
    return FusedRepresentation(fused=T.concat(parts, axis=-1) if len(parts) > 1 else parts[0])


def fuse(context: Tensor, attn: Tensor | None, cond: Tensor | None) -> FusedRepresentation:
    """Single utterance: tile the conditioning vector over T and concatenate."""
    c3 = T.reshape(context, (1,) + context.shape)
    a3 = T.reshape(attn, (1,) + attn.shape) if attn is not None else None
    v2 = T.reshape(cond, (1,) + cond.shape) if cond is not None else None
    out = fuse_batch(c3, a3, v2)
    return FusedRepresentation(fused=T.reshape(out.fused, out.fused.shape[1:]))


@dataclass
class MddForward:
    logits: Tensor  # B x T x (num_symbols + 1); last column is blank
    frame_length: np.ndarray
    aux: AuxOutput | None = None


def mdd_forward_batch(
    P: dict[str, Tensor],
    cfg: ModelConfig,
    feats: Tensor,
    lengths: np.ndarray,
    canonical: np.ndarray | None = None,
    canonical_lengths: np.ndarray | None = None,
    l1: list[str] | None = None,
    l2: list[str] | None = None,
    acfg: AuxConfig | None = None,
) -> MddForward:
    enc = speech_encode_batch(P, cfg.encoder_dims(), feats, lengths)
    attn = None
    if cfg.phoneme_encoder:
        if canonical is None or canonical_lengths is None:
            raise ContractError("this configuration needs canonical phoneme ids")
        phon = phoneme_encode_batch(P, cfg, canonical, canonical_lengths)
        attn = cross_attention_batch(P, enc.context, phon.contextual, canonical_lengths)
    cond: Tensor | None = None
    aux_out: AuxOutput | None = None
    bsz = feats.shape[0]
    if cfg.conditioning == "aux":
        if acfg is None:
            raise ContractError("conditioning mode 'aux' needs the auxiliary config and parameters")
        aux_out = aux_forward_batch(P, acfg, feats, lengths)
        cond = aux_out.embedding
    elif cfg.conditioning != "none":
        rows = np.stack(
            [
                one_hot_conditioning(cfg, l1=None if l1 is None else l1[i], l2=None if l2 is None else l2[i])
                for i in range(bsz)
            ]
        )
        cond = Tensor(rows)
    fused = fuse_batch(enc.context, attn, cond).fused
    hidden = T.relu(T.add(T.matmul(fused, P["proj.w1"]), P["proj.b1"]))
    logits = T.add(T.matmul(hidden, P["head.w"]), P["head.b"])
    return MddForward(logits=logits, frame_length=enc.frame_length, aux=aux_out)


def mdd_forward(
    P: dict[str, Tensor],
    cfg: ModelConfig,
    features: Tensor,
    canonical_ids: list[int] | None = None,
    l1: str | None = None,
    l2: str | None = None,
    acfg: AuxConfig | None = None,
) -> MddForward:
    out = mdd_forward_batch(
        P,
        cfg,
        T.reshape(features, (1,) + features.shape),
        np.array([features.shape[0]]),
        canonical=None if canonical_ids is None else np.asarray([canonical_ids], dtype=np.intp),
        canonical_lengths=None if canonical_ids is None else np.array([len(canonical_ids)]),
        l1=None if l1 is None else [l1],
        l2=None if l2 is None else [l2],
        acfg=acfg,
    )
    return MddForward(
        logits=T.reshape(out.logits, out.logits.shape[1:]),
        frame_length=int(out.frame_length[0]),
        aux=out.aux,
    )
