"""Miniature decoder-style sequence encoder with hand-written backprop.

One shared stack serves three input layouts:

  * text:     token ids  ... <EOS>                (causal mask)
  * document: patch features ... <EOS>            (causal mask)
  * generation: patch features, <EOS>, OCR tokens (compression mask)

The retrieval head is the final-layer hidden state at the <EOS> position,
L2-normalized so inner products are cosines. The generation head projects
hidden states to vocabulary log-probabilities; under the compression mask
the OCR positions can see only the <EOS> summary and earlier OCR tokens,
never the image positions directly.

Architecture: learned token + position embeddings, a two-layer MLP
projector for patch features, n_layers of pre-norm multi-head attention
plus a two-layer GELU feed-forward, a final layer norm, and a linear
vocabulary head. All gradients are derived by hand and validated against
central finite differences (see grad_check).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .text import EOS_ID

_LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715

CHECKPOINT_MAGIC = b"VDRG"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layouts and attention masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceLayout:
    """Positions: n_image patch slots, one <EOS>, then n_ocr token slots."""

    n_image: int
    n_ocr: int

    def __post_init__(self):
        if self.n_image < 0 or self.n_ocr < 0:
            raise DataError("segment lengths must be non-negative")

    @property
    def eos_pos(self) -> int:
        return self.n_image

    @property
    def total(self) -> int:
        return self.n_image + 1 + self.n_ocr


def build_causal_mask(t: int) -> np.ndarray:
    """Boolean (t, t) matrix; entry (i, j) is True iff j <= i."""
    if t < 1:
        raise DataError(f"sequence length must be >= 1, got {t}")
    return np.tril(np.ones((t, t), dtype=bool))


def build_rcg_mask(layout: SequenceLayout) -> np.ndarray:
    """Compression mask: image and <EOS> rows are causal; OCR rows may
    attend only to the <EOS> position and to earlier (or own) OCR positions.
    Every (OCR row, image column) entry is False."""
    t = layout.total
    eos = layout.eos_pos
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    causal = j <= i
    ocr_allowed = (j == eos) | ((j > eos) & (j <= i))
    return np.where(i > eos, ocr_allowed, causal)


def _additive_mask(mask: np.ndarray, dtype) -> np.ndarray:
    add = np.zeros(mask.shape, dtype=dtype)
    add[~mask] = -np.inf
    return add


# ---------------------------------------------------------------------------
# primitive ops (forward + backward pairs)
# ---------------------------------------------------------------------------

def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_backward(dy, cache, g, grads, g_name, b_name):
    xhat, inv = cache
    grads[g_name] += (dy * xhat).sum(axis=0)
    grads[b_name] += dy.sum(axis=0)
    dxhat = dy * g
    return inv * (dxhat
                  - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_in: int = 64          # patch feature dimension (G*G)
    d_ff: int | None = None  # defaults to 4*d_model
    max_len: int = 512

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must include the reserved tokens")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _param_spec(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init-kind) in checkpoint declaration order."""
    d, v = cfg.d_model, cfg.vocab_size
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (v, d), "uniform"),
        ("pos_emb", (cfg.max_len, d), "uniform"),
        ("proj_w1", (cfg.d_in, d), "uniform"),
        ("proj_b1", (d,), "zeros"),
        ("proj_w2", (d, d), "uniform"),
        ("proj_b2", (d,), "zeros"),
    ]
    for i in range(cfg.n_layers):
        spec += [
            (f"l{i}.ln1_g", (d,), "ones"), (f"l{i}.ln1_b", (d,), "zeros"),
            (f"l{i}.wq", (d, d), "uniform"), (f"l{i}.bq", (d,), "zeros"),
            (f"l{i}.wk", (d, d), "uniform"), (f"l{i}.bk", (d,), "zeros"),
            (f"l{i}.wv", (d, d), "uniform"), (f"l{i}.bv", (d,), "zeros"),
            (f"l{i}.wo", (d, d), "uniform"), (f"l{i}.bo", (d,), "zeros"),
            (f"l{i}.ln2_g", (d,), "ones"), (f"l{i}.ln2_b", (d,), "zeros"),
            (f"l{i}.ff_w1", (d, cfg.d_ff), "uniform"), (f"l{i}.ff_b1", (cfg.d_ff,), "zeros"),
            (f"l{i}.ff_w2", (cfg.d_ff, d), "uniform"), (f"l{i}.ff_b2", (d,), "zeros"),
        ]
    spec += [
        ("lnf_g", (d,), "ones"), ("lnf_b", (d,), "zeros"),
        ("out_w", (d, v), "uniform"), ("out_b", (v,), "zeros"),
    ]
    return spec


@dataclass
class _SeqCache:
    segments: list          # assembly records for input backward
    t: int
    eos_pos: int
    layer_inputs: list      # X entering each layer
    layer_caches: list
    lnf_in: np.ndarray
    lnf_cache: tuple
    h_final: np.ndarray
    head: dict = field(default_factory=dict)
    frozen: bool = False    # set when eos_override was used; backward invalid


class EncoderModel:
    """Parameter container plus forward/backward passes.

    Forward passes are pure given frozen parameters; training code owns
    exclusive mutation of `params`.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        for name, shape, _ in _param_spec(config):
            if name not in params or params[name].shape != shape:
                raise ConfigError(f"parameter {name} missing or mis-shaped")

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, dtype=np.float32) -> "EncoderModel":
        """Seeded init: weight/embedding tensors uniform(-0.05, 0.05),
        biases zero, normalization gains one."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape, kind in _param_spec(config):
            if kind == "uniform":
                arr = rng.uniform(-0.05, 0.05, size=shape)
            elif kind == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = arr.astype(dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- input assembly -----------------------------------------------------

    def _assemble(self, segments: list[tuple[str, object]]):
        """segments: ("tok", id-list) | ("patch", (m, d_in) array)."""
        p = self.params
        rows: list[np.ndarray] = []
        records = []
        offset = 0
        for kind, payload in segments:
            if kind == "tok":
                ids = np.asarray(payload, dtype=np.int64)
                if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
                    raise DataError("token id out of vocabulary range")
                rows.append(p["tok_emb"][ids])
                records.append(("tok", ids, offset, offset + len(ids)))
                offset += len(ids)
            elif kind == "patch":
                feats = np.asarray(payload, dtype=self.dtype)
                if feats.ndim != 2 or feats.shape[1] != self.config.d_in:
                    raise DataError(f"patch features must be (m, {self.config.d_in})")
                h1 = feats @ p["proj_w1"] + p["proj_b1"]
                hg = _gelu(h1)
                z = hg @ p["proj_w2"] + p["proj_b2"]
                rows.append(z)
                records.append(("patch", (feats, h1, hg), offset, offset + len(feats)))
                offset += len(feats)
            else:  # pragma: no cover - internal misuse
                raise ValueError(kind)
        t = offset
        if t < 1:
            raise DataError("empty input sequence")
        if t > self.config.max_len:
            raise DataError(f"sequence length {t} exceeds max length {self.config.max_len}")
        x = np.concatenate(rows, axis=0) + p["pos_emb"][:t]
        return x, records

    def _assemble_backward(self, records, dx, grads):
        grads["pos_emb"][:dx.shape[0]] += dx
        p = self.params
        for kind, payload, lo, hi in records:
            dseg = dx[lo:hi]
            if kind == "tok":
                np.add.at(grads["tok_emb"], payload, dseg)
            else:
                feats, h1, hg = payload
                grads["proj_w2"] += hg.T @ dseg
                grads["proj_b2"] += dseg.sum(axis=0)
                dhg = dseg @ p["proj_w2"].T
                dh1 = dhg * _gelu_grad(h1)
                grads["proj_w1"] += feats.T @ dh1
                grads["proj_b1"] += dh1.sum(axis=0)

    # -- transformer stack --------------------------------------------------

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        t = x.shape[0]
        cfg = self.config
        return x.reshape(t, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        h, t, dh = x.shape
        return x.transpose(1, 0, 2).reshape(t, h * dh)

    def _stack_forward(self, x: np.ndarray, mask: np.ndarray,
                       eos_override: Sequence[np.ndarray] | None = None,
                       eos_pos: int | None = None):
        cfg = self.config
        p = self.params
        add_mask = _additive_mask(mask, self.dtype)
        scale = 1.0 / np.sqrt(cfg.head_dim)
        layer_inputs, layer_caches = [], []

        for li in range(cfg.n_layers):
            if eos_override is not None:
                x = x.copy()
                x[eos_pos] = eos_override[li]
            layer_inputs.append(x)
            pre = f"l{li}."
            a, ln1c = _layernorm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = a @ p[pre + "wq"] + p[pre + "bq"]
            k = a @ p[pre + "wk"] + p[pre + "bk"]
            v = a @ p[pre + "wv"] + p[pre + "bv"]
            qh, kh, vh = map(self._split_heads, (q, k, v))
            scores = qh @ kh.transpose(0, 2, 1) * scale + add_mask
            attn = _softmax_rows(scores)
            zh = attn @ vh
            z = self._merge_heads(zh)
            o = z @ p[pre + "wo"] + p[pre + "bo"]
            x1 = x + o
            b2, ln2c = _layernorm(x1, p[pre + "ln2_g"], p[pre + "ln2_b"])
            f1 = b2 @ p[pre + "ff_w1"] + p[pre + "ff_b1"]
            fg = _gelu(f1)
            f2 = fg @ p[pre + "ff_w2"] + p[pre + "ff_b2"]
            x = x1 + f2
            layer_caches.append((a, ln1c, qh, kh, vh, attn, z, x1, b2, ln2c, f1, fg))

        h_final, lnfc = _layernorm(x, p["lnf_g"], p["lnf_b"])
        return h_final, layer_inputs, layer_caches, x, lnfc

    def _stack_backward(self, cache: _SeqCache, dh_final: np.ndarray, grads) -> np.ndarray:
        if cache.frozen:
            raise NumericError("cannot backprop through an eos-override probe")
        cfg = self.config
        p = self.params
        scale = 1.0 / np.sqrt(cfg.head_dim)
        dx = _layernorm_backward(dh_final, cache.lnf_cache, p["lnf_g"], grads, "lnf_g", "lnf_b")

        for li in reversed(range(cfg.n_layers)):
            pre = f"l{li}."
            x = cache.layer_inputs[li]
            a, ln1c, qh, kh, vh, attn, z, x1, b2, ln2c, f1, fg = cache.layer_caches[li]

            # feed-forward block
            df2 = dx
            grads[pre + "ff_w2"] += fg.T @ df2
            grads[pre + "ff_b2"] += df2.sum(axis=0)
            dfg = df2 @ p[pre + "ff_w2"].T
            df1 = dfg * _gelu_grad(f1)
            grads[pre + "ff_w1"] += b2.T @ df1
            grads[pre + "ff_b1"] += df1.sum(axis=0)
            db2 = df1 @ p[pre + "ff_w1"].T
            dx1 = dx + _layernorm_backward(db2, ln2c, p[pre + "ln2_g"], grads,
                                           pre + "ln2_g", pre + "ln2_b")

            # attention block
            do = dx1
            grads[pre + "wo"] += z.T @ do
            grads[pre + "bo"] += do.sum(axis=0)
            dz = do @ p[pre + "wo"].T
            dzh = self._split_heads(dz)
            dattn = dzh @ vh.transpose(0, 2, 1)
            dvh = attn.transpose(0, 2, 1) @ dzh
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dqh = dscores @ kh * scale
            dkh = dscores.transpose(0, 2, 1) @ qh * scale
            dq, dk, dv = map(self._merge_heads, (dqh, dkh, dvh))
            grads[pre + "wq"] += a.T @ dq
            grads[pre + "bq"] += dq.sum(axis=0)
            grads[pre + "wk"] += a.T @ dk
            grads[pre + "bk"] += dk.sum(axis=0)
            grads[pre + "wv"] += a.T @ dv
            grads[pre + "bv"] += dv.sum(axis=0)
            da = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
            dx = dx1 + _layernorm_backward(da, ln1c, p[pre + "ln1_g"], grads,
                                           pre + "ln1_g", pre + "ln1_b")
        return dx

    # -- embedding head -----------------------------------------------------

    def _encode(self, segments) -> tuple[np.ndarray, _SeqCache]:
        x, records = self._assemble(segments)
        t = x.shape[0]
        mask = build_causal_mask(t)
        h_final, layer_inputs, layer_caches, lnf_in, lnfc = self._stack_forward(x, mask)
        h = h_final[t - 1]
        norm = float(np.sqrt(h @ h))
        if not np.isfinite(norm) or norm == 0.0:
            raise NumericError("embedding has zero or non-finite norm")
        emb = h / norm
        cache = _SeqCache(records, t, t - 1, layer_inputs, layer_caches, lnf_in, lnfc, h_final,
                          head={"norm": norm, "emb": emb})
        return emb, cache

    def embed_text_with_cache(self, token_ids: Sequence[int]):
        """<EOS>-pooled unit embedding of a token sequence (appends <EOS>)."""
        ids = list(token_ids) + [EOS_ID]
        return self._encode([("tok", ids)])

    def embed_document_with_cache(self, patch_features: np.ndarray):
        """<EOS>-pooled unit embedding of a patch-feature sequence."""
        return self._encode([("patch", patch_features), ("tok", [EOS_ID])])

    def embed_text(self, token_ids: Sequence[int]) -> np.ndarray:
        return self.embed_text_with_cache(token_ids)[0]

    def embed_document(self, patch_features: np.ndarray) -> np.ndarray:
        return self.embed_document_with_cache(patch_features)[0]

    def backward_embedding(self, cache: _SeqCache, d_emb: np.ndarray, grads) -> None:
        emb, norm = cache.head["emb"], cache.head["norm"]
        dh = (d_emb - emb * (emb @ d_emb)) / norm
        dh_final = np.zeros_like(cache.h_final)
        dh_final[cache.eos_pos] = dh
        dx = self._stack_backward(cache, dh_final, grads)
        self._assemble_backward(cache.segments, dx, grads)

    # -- generation head ----------------------------------------------------

    def forward_rcg(self, patch_features: np.ndarray, ocr_ids: Sequence[int],
                    eos_override: Sequence[np.ndarray] | None = None):
        """Teacher-forced OCR log-probabilities under the compression mask.

        Returns (logprobs, cache) where logprobs[i] is the prediction for
        OCR token i, read at the <EOS> position for i=0 and at OCR position
        i-1 afterwards. Row i therefore depends only on the <EOS> summary
        and the preceding OCR tokens.
        """
        ocr_ids = list(ocr_ids)
        l = len(ocr_ids)
        if l < 1:
            raise DataError("forward_rcg needs at least one OCR token")
        feats = np.asarray(patch_features, dtype=self.dtype)
        layout = SequenceLayout(n_image=len(feats), n_ocr=l)
        if eos_override is not None and len(eos_override) != self.config.n_layers:
            raise DataError("eos_override must supply one vector per layer")

        x, records = self._assemble([("patch", feats), ("tok", [EOS_ID] + ocr_ids)])
        mask = build_rcg_mask(layout)
        h_final, layer_inputs, layer_caches, lnf_in, lnfc = self._stack_forward(
            x, mask, eos_override=eos_override, eos_pos=layout.eos_pos)

        read = np.arange(layout.eos_pos, layout.eos_pos + l)
        logits = h_final[read] @ self.params["out_w"] + self.params["out_b"]
        m = logits.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        logprobs = logits - lse

        cache = _SeqCache(records, layout.total, layout.eos_pos, layer_inputs, layer_caches,
                          lnf_in, lnfc, h_final,
                          head={"read": read, "probs": np.exp(logprobs)},
                          frozen=eos_override is not None)
        return logprobs, cache

    def backward_rcg(self, cache: _SeqCache, d_logprobs: np.ndarray, grads) -> None:
        read, probs = cache.head["read"], cache.head["probs"]
        dlogits = d_logprobs - probs * d_logprobs.sum(axis=-1, keepdims=True)
        grads["out_w"] += cache.h_final[read].T @ dlogits
        grads["out_b"] += dlogits.sum(axis=0)
        dh_final = np.zeros_like(cache.h_final)
        dh_final[read] = dlogits @ self.params["out_w"].T
        dx = self._stack_backward(cache, dh_final, grads)
        self._assemble_backward(cache.segments, dx, grads)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(model: EncoderModel,
               loss_and_grad: Callable[[EncoderModel], tuple[float, dict[str, np.ndarray]]],
               eps: float = 1e-4) -> float:
    """Max relative disagreement between analytic and central-difference
    gradients, |analytic - fd| / (|analytic| + 1e-8), over every parameter
    component. Runs on a float64 copy of the model.
    """
    if not 0.0 < eps <= 1e-2:
        raise ConfigError(f"eps must be in (0, 1e-2], got {eps}")
    m = model.astype(np.float64)
    loss, grads = loss_and_grad(m)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss!r} in grad_check")

    worst = 0.0
    for name, theta in m.params.items():
        g = grads[name]
        flat = theta.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lo_p = loss_and_grad(m)[0]
            flat[idx] = orig - eps
            lo_m = loss_and_grad(m)[0]
            flat[idx] = orig
            fd = (lo_p - lo_m) / (2.0 * eps)
            rel = abs(gflat[idx] - fd) / (abs(gflat[idx]) + 1e-8)
            if rel > worst:
                worst = rel
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIII")


def save_checkpoint(model: EncoderModel, path) -> None:
    """Binary checkpoint: little-endian header then f32 tensors in
    declaration order."""
    from .ioutil import atomic_write_bytes

    cfg = model.config
    out = bytearray(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.d_model,
                                 cfg.n_layers, cfg.n_heads, cfg.vocab_size, cfg.d_in))
    for name, _, _ in _param_spec(cfg):
        out += np.ascontiguousarray(model.params[name], dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(out))


def load_checkpoint(path, d_ff: int | None = None, max_len: int = 512) -> EncoderModel:
    """Load a checkpoint. d_ff and max_len are not part of the header;
    pass them when they differ from the defaults (4*d_model, 512)."""
    from pathlib import Path

    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"checkpoint {path} is truncated")
    magic, version, d_model, n_layers, n_heads, vocab_size, d_in = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    cfg = EncoderConfig(vocab_size=vocab_size, d_model=d_model, n_layers=n_layers,
                        n_heads=n_heads, d_in=d_in, d_ff=d_ff, max_len=max_len)
    params: dict[str, np.ndarray] = {}
    offset = _HEADER.size
    for name, shape, _ in _param_spec(cfg):
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(blob):
            raise DataError(f"checkpoint {path} is truncated at tensor {name}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise DataError(f"checkpoint {path} has {len(blob) - offset} trailing bytes "
                        "(d_ff/max_len mismatch?)")
    return EncoderModel(cfg, params)
