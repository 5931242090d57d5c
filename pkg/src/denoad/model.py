"""Transformer encoder-decoder with per-layer adapter sockets.

Pre-LN layout, shared token embeddings with a tied output projection,
learned positions, and a named parameter set partitioned into groups
(embeddings, attention blocks, FFNs, layer norms, cross-attention) so
freeze policies and the model fingerprint can select on them.  The
socket after each layer's feed-forward block applies the bound adapter
from an ActiveSelection, or passes through.

Two forward paths: a graph path (encode / decode_scores / forward_loss)
used for training and forced scoring, and a numpy incremental path with
a KV cache (start_decode / step_decode) used for generation.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import numcore as nc
from .adapters import LN_EPS, adapter_forward
from .errors import ConfigError, DataError, IncompatibilityError
from .tensorio import MAGIC_MODEL, read_archive, write_archive
from .utils import derive_rng, json_canonical

NEG_BIAS = -1e9

GROUP_NAMES = (
    "embeddings",
    "output_projection",
    "enc_self_attn",
    "dec_self_attn",
    "cross_attn",
    "enc_ffn",
    "dec_ffn",
    "layer_norms",
    "adapters",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    enc_layers: int = 4
    dec_layers: int = 4
    hidden: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    max_positions: int = 128
    dropout: float = 0.3
    attn_dropout: float = 0.1
    share_embeddings: bool = True

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must cover specials, got {self.vocab_size}")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        for name in ("enc_layers", "dec_layers", "heads", "ffn_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("dropout", "attn_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from None


def paper_scale(vocab_size: int, **overrides) -> ModelConfig:
    """The full-size preset; not the default (CPU budget)."""
    cfg = ModelConfig(
        vocab_size=vocab_size,
        enc_layers=12,
        dec_layers=12,
        hidden=1024,
        heads=16,
        ffn_dim=4096,
        max_positions=1024,
    )
    return replace(cfg, **overrides) if overrides else cfg


def _attn_names(prefix):
    return [f"{prefix}.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def _ffn_names(prefix):
    return [f"{prefix}.{n}" for n in ("w1", "b1", "w2", "b2")]


def _ln_names(prefix):
    return [f"{prefix}.gain", f"{prefix}.bias"]


class Model:
    """Parameter container plus the forward paths.

    `dropout_rate` / `attn_dropout_rate` are mutable copies of the
    config probabilities so a trainer can override them without
    touching the frozen config.
    """

    def __init__(self, cfg: ModelConfig, params):
        self.cfg = cfg
        self.params = dict(params)
        self.dropout_rate = cfg.dropout
        self.attn_dropout_rate = cfg.attn_dropout
        self._scale = nc.Tensor(
            np.asarray(math.sqrt(cfg.hidden), dtype=np.float32)
        )
        self._inv_sqrt_d = nc.Tensor(
            np.asarray(1.0 / math.sqrt(cfg.hidden // cfg.heads), dtype=np.float32)
        )

    # --- structure ---

    def param_groups(self):
        """Group name -> parameter names; a strict partition."""
        c = self.cfg
        groups = {name: [] for name in GROUP_NAMES}
        groups["embeddings"] += ["embed.tokens", "embed.enc_pos", "embed.dec_pos"]
        if not c.share_embeddings:
            groups["output_projection"].append("out.proj")
        for i in range(c.enc_layers):
            groups["enc_self_attn"] += _attn_names(f"enc.{i}.self")
            groups["enc_ffn"] += _ffn_names(f"enc.{i}.ffn")
            groups["layer_norms"] += _ln_names(f"enc.{i}.ln1") + _ln_names(f"enc.{i}.ln2")
        for i in range(c.dec_layers):
            groups["dec_self_attn"] += _attn_names(f"dec.{i}.self")
            groups["cross_attn"] += _attn_names(f"dec.{i}.cross")
            groups["dec_ffn"] += _ffn_names(f"dec.{i}.ffn")
            groups["layer_norms"] += (
                _ln_names(f"dec.{i}.ln1")
                + _ln_names(f"dec.{i}.ln2")
                + _ln_names(f"dec.{i}.ln3")
            )
        groups["layer_norms"] += _ln_names("enc.final_ln") + _ln_names("dec.final_ln")
        return groups

    def named_parameters(self):
        return dict(self.params)

    @property
    def n_params(self):
        return sum(t.data.size for t in self.params.values())

    def fingerprint(self) -> str:
        """Identity hash: config plus every parameter outside the
        cross-attention group, so cross-attention fine-tuning keeps
        previously trained adapter sets bindable."""
        h = hashlib.sha256()
        h.update(json_canonical(self.cfg.to_dict()).encode("utf-8"))
        skip = set(self.param_groups()["cross_attn"])
        for name in sorted(self.params):
            if name in skip:
                continue
            h.update(name.encode("utf-8"))
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def eval_mode(self):
        self.dropout_rate = 0.0
        self.attn_dropout_rate = 0.0
        return self

    # --- selection checks ---

    def _check_stack(self, stack, expected_layers, side):
        if stack is None:
            return None
        if len(stack) != expected_layers:
            raise IncompatibilityError(
                f"{side} adapter stack has {len(stack)} layers, model has {expected_layers}"
            )
        for layer in stack:
            if layer.hidden != self.cfg.hidden:
                raise IncompatibilityError(
                    f"{side} adapter width {layer.hidden} != model hidden {self.cfg.hidden}"
                )
        return stack

    def _resolve_selection(self, selection):
        if selection is None:
            return None, None, None
        enc = self._check_stack(selection.encoder_adapters, self.cfg.enc_layers, "encoder")
        dec = self._check_stack(selection.decoder_adapters, self.cfg.dec_layers, "decoder")
        delta = selection.output_delta
        if delta is not None and delta.data.shape != (self.cfg.vocab_size, self.cfg.hidden):
            raise IncompatibilityError(
                f"output delta shape {delta.data.shape} does not fit vocab/hidden"
            )
        return enc, dec, delta

    # --- graph forward ---

    def _positions(self, length):
        if length > self.cfg.max_positions:
            raise DataError(
                f"sequence length {length} exceeds max positions {self.cfg.max_positions}"
            )
        return np.arange(length)

    def _embed(self, ids, pos_name, rng, train):
        tok = nc.mul(nc.embedding(self.params["embed.tokens"], ids), self._scale)
        pos = nc.embedding(self.params[pos_name], self._positions(ids.shape[-1]))
        return nc.dropout(nc.add(tok, pos), self.dropout_rate, rng, train)

    def _attention(self, q_in, kv_in, prefix, bias, rng, train):
        p = self.params
        c = self.cfg
        H, d = c.heads, c.hidden // c.heads
        bq, tq = q_in.data.shape[0], q_in.data.shape[1]
        s = kv_in.data.shape[1]
        q = nc.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = nc.linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
        v = nc.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        q = nc.transpose(nc.reshape(q, (bq, tq, H, d)), (0, 2, 1, 3))
        k = nc.transpose(nc.reshape(k, (bq, s, H, d)), (0, 2, 3, 1))
        v = nc.transpose(nc.reshape(v, (bq, s, H, d)), (0, 2, 1, 3))
        scores = nc.mul(nc.matmul(q, k), self._inv_sqrt_d)
        if bias is not None:
            scores = nc.add(scores, nc.Tensor(bias))
        attn = nc.dropout(nc.softmax(scores), self.attn_dropout_rate, rng, train)
        ctx = nc.reshape(
            nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (bq, tq, c.hidden)
        )
        return nc.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ffn(self, x, prefix):
        p = self.params
        h = nc.relu(nc.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return nc.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _ln(self, x, prefix):
        return nc.layer_norm(
            x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"], eps=LN_EPS
        )

    def _sublayer(self, x, out, rng, train):
        return nc.add(x, nc.dropout(out, self.dropout_rate, rng, train))

    def encode(self, src, src_mask, selection=None, rng=None, train=False):
        """Source ids (B,S) + keep-mask -> encoder states (B,S,h)."""
        src = np.asarray(src)
        if src.ndim != 2 or src.shape[1] == 0:
            raise DataError(f"source batch must be (B,S) with S >= 1, got {src.shape}")
        enc_ad, _, _ = self._resolve_selection(selection)
        bias = src_pad_bias(src_mask)
        x = self._embed(src, "embed.enc_pos", rng, train)
        for i in range(self.cfg.enc_layers):
            normed = self._ln(x, f"enc.{i}.ln1")
            a = self._attention(normed, normed, f"enc.{i}.self", bias, rng, train)
            x = self._sublayer(x, a, rng, train)
            x = self._sublayer(x, self._ffn(self._ln(x, f"enc.{i}.ln2"), f"enc.{i}.ffn"), rng, train)
            if enc_ad is not None:
                x = adapter_forward(x, enc_ad[i])
        return self._ln(x, "enc.final_ln")

    def decode_scores(self, enc_states, src_mask, prefix, selection=None, rng=None, train=False):
        """Teacher-forced logits (B,T,V) for every prefix position."""
        prefix = np.asarray(prefix)
        if enc_states.data.ndim != 3 or enc_states.data.shape[1] == 0:
            raise DataError("decoding requires non-empty encoder states")
        if prefix.ndim != 2 or prefix.shape[1] == 0:
            raise DataError("decoder prefix must start with the target tag")
        _, dec_ad, delta = self._resolve_selection(selection)
        t = prefix.shape[1]
        causal = np.triu(np.full((t, t), NEG_BIAS, dtype=np.float32), k=1)
        src_bias = src_pad_bias(src_mask)
        x = self._embed(prefix, "embed.dec_pos", rng, train)
        for i in range(self.cfg.dec_layers):
            normed = self._ln(x, f"dec.{i}.ln1")
            a = self._attention(normed, normed, f"dec.{i}.self", causal, rng, train)
            x = self._sublayer(x, a, rng, train)
            a = self._attention(
                self._ln(x, f"dec.{i}.ln2"), enc_states, f"dec.{i}.cross",
                src_bias, rng, train,
            )
            x = self._sublayer(x, a, rng, train)
            x = self._sublayer(x, self._ffn(self._ln(x, f"dec.{i}.ln3"), f"dec.{i}.ffn"), rng, train)
            if dec_ad is not None:
                x = adapter_forward(x, dec_ad[i])
        x = self._ln(x, "dec.final_ln")
        return nc.project_vocab(x, self._projection(), delta)

    def _projection(self):
        if self.cfg.share_embeddings:
            return self.params["embed.tokens"]
        return self.params["out.proj"]

    def forward_loss(self, batch, selection=None, smoothing=0.0, rng=None, train=False,
                     encoder_grad=True, pad_id=0):
        """Label-smoothed loss on one batch; one code path for
        denoising (corrupted->clean) and translation (src->tgt).

        encoder_grad=False runs the encoder outside the graph; only
        valid when no encoder-side parameter is being trained.
        """
        if encoder_grad:
            enc = self.encode(batch.src, batch.src_mask, selection, rng, train)
        else:
            with nc.no_grad():
                enc = self.encode(batch.src, batch.src_mask, selection, rng, train)
        logits = self.decode_scores(enc, batch.src_mask, batch.tgt_in, selection, rng, train)
        return nc.label_smoothed_nll(logits, batch.labels, smoothing, pad_id)

    # --- incremental numpy path ---

    def start_decode(self, enc_states, src_mask, selection=None):
        """Precompute cross-attention keys/values; returns a DecodeState."""
        enc = np.asarray(enc_states, dtype=np.float32)
        if enc.ndim != 3 or enc.shape[1] == 0:
            raise DataError("decoding requires non-empty encoder states")
        _, dec_ad, delta = self._resolve_selection(selection)
        c = self.cfg
        H, d = c.heads, c.hidden // c.heads
        b, s, _ = enc.shape
        p = self.params
        ck, cv = [], []
        for i in range(c.dec_layers):
            k = enc @ p[f"dec.{i}.cross.wk"].data + p[f"dec.{i}.cross.bk"].data
            v = enc @ p[f"dec.{i}.cross.wv"].data + p[f"dec.{i}.cross.bv"].data
            ck.append(k.reshape(b, s, H, d).transpose(0, 2, 3, 1))
            cv.append(v.reshape(b, s, H, d).transpose(0, 2, 1, 3))
        return DecodeState(
            cross_k=ck,
            cross_v=cv,
            src_bias=src_pad_bias(src_mask),
            self_k=[np.zeros((b, H, d, 0), dtype=np.float32) for _ in range(c.dec_layers)],
            self_v=[np.zeros((b, H, 0, d), dtype=np.float32) for _ in range(c.dec_layers)],
            step=0,
            decoder_adapters=dec_ad,
            output_delta=None if delta is None else delta.data,
        )

    def step_decode(self, state, tokens):
        """Feed one token per row, return next-token logits (B,V)."""
        c = self.cfg
        p = self.params
        H, d = c.heads, c.hidden // c.heads
        tokens = np.asarray(tokens)
        b = tokens.shape[0]
        if state.step >= c.max_positions:
            raise DataError(f"decode ran past max positions {c.max_positions}")
        x = (
            p["embed.tokens"].data[tokens] * np.float32(math.sqrt(c.hidden))
            + p["embed.dec_pos"].data[state.step]
        )
        inv = np.float32(1.0 / math.sqrt(d))
        for i in range(c.dec_layers):
            h = _np_ln(x, p[f"dec.{i}.ln1.gain"].data, p[f"dec.{i}.ln1.bias"].data)
            q = (h @ p[f"dec.{i}.self.wq"].data + p[f"dec.{i}.self.bq"].data).reshape(b, H, 1, d)
            k = (h @ p[f"dec.{i}.self.wk"].data + p[f"dec.{i}.self.bk"].data).reshape(b, H, d, 1)
            v = (h @ p[f"dec.{i}.self.wv"].data + p[f"dec.{i}.self.bv"].data).reshape(b, H, 1, d)
            state.self_k[i] = np.concatenate([state.self_k[i], k], axis=3)
            state.self_v[i] = np.concatenate([state.self_v[i], v], axis=2)
            ctx = _np_attend(q, state.self_k[i], state.self_v[i], None, inv).reshape(b, c.hidden)
            x = x + ctx @ p[f"dec.{i}.self.wo"].data + p[f"dec.{i}.self.bo"].data

            h = _np_ln(x, p[f"dec.{i}.ln2.gain"].data, p[f"dec.{i}.ln2.bias"].data)
            q = (h @ p[f"dec.{i}.cross.wq"].data + p[f"dec.{i}.cross.bq"].data).reshape(b, H, 1, d)
            ctx = _np_attend(q, state.cross_k[i], state.cross_v[i], state.src_bias, inv)
            x = x + ctx.reshape(b, c.hidden) @ p[f"dec.{i}.cross.wo"].data + p[f"dec.{i}.cross.bo"].data

            h = _np_ln(x, p[f"dec.{i}.ln3.gain"].data, p[f"dec.{i}.ln3.bias"].data)
            f = np.maximum(h @ p[f"dec.{i}.ffn.w1"].data + p[f"dec.{i}.ffn.b1"].data, 0.0)
            x = x + f @ p[f"dec.{i}.ffn.w2"].data + p[f"dec.{i}.ffn.b2"].data
            if state.decoder_adapters is not None:
                x = _np_adapter(x, state.decoder_adapters[i])
        x = _np_ln(x, p["dec.final_ln.gain"].data, p["dec.final_ln.bias"].data)
        w = self._projection().data
        if state.output_delta is not None:
            w = w + state.output_delta
        state.step += 1
        return x @ w.T


@dataclass
class DecodeState:
    """KV cache for incremental decoding; first axis is the row axis,
    reorderable for beam bookkeeping."""

    cross_k: list
    cross_v: list
    src_bias: np.ndarray
    self_k: list
    self_v: list
    step: int
    decoder_adapters: list | None = None
    output_delta: np.ndarray | None = None

    def reorder(self, idx):
        idx = np.asarray(idx)
        self.cross_k = [a[idx] for a in self.cross_k]
        self.cross_v = [a[idx] for a in self.cross_v]
        self.self_k = [a[idx] for a in self.self_k]
        self.self_v = [a[idx] for a in self.self_v]
        self.src_bias = self.src_bias[idx]
        return self


def src_pad_bias(src_mask):
    """Keep-mask (B,S) -> additive attention bias (B,1,1,S)."""
    m = np.asarray(src_mask, dtype=bool)
    return np.where(m, 0.0, NEG_BIAS).astype(np.float32)[:, None, None, :]


def _np_ln(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + np.float32(eps)) * gain + bias


def _np_attend(q, k, v, bias, inv_sqrt_d):
    scores = (q @ k) * inv_sqrt_d
    if bias is not None:
        scores = scores + bias
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return (e / e.sum(axis=-1, keepdims=True)) @ v


def _np_adapter(x, layer):
    h = _np_ln(x, layer.ln_gain.data, layer.ln_bias.data)
    h = np.maximum(h @ layer.w_down.data + layer.b_down.data, 0.0)
    return x + h @ layer.w_up.data + layer.b_up.data


# --- construction ---


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Seeded init: scaled-normal matrices, zero biases, unit norms."""
    rng = derive_rng(seed, "model")
    h, ffn, v = cfg.hidden, cfg.ffn_dim, cfg.vocab_size

    params = {}

    def mat(name, rows, cols):
        std = math.sqrt(2.0 / (rows + cols))
        params[name] = nc.Tensor(
            (rng.normal(size=(rows, cols)) * std).astype(np.float32), requires_grad=True
        )

    def zeros(name, *shape):
        params[name] = nc.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(name, *shape):
        params[name] = nc.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    def emb(name, rows):
        params[name] = nc.Tensor(
            (rng.normal(size=(rows, h)) * h ** -0.5).astype(np.float32),
            requires_grad=True,
        )

    def attn(prefix):
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            mat(f"{prefix}.{w}", h, h)
            zeros(f"{prefix}.{b}", h)

    def ffn_block(prefix):
        mat(f"{prefix}.w1", h, ffn)
        zeros(f"{prefix}.b1", ffn)
        mat(f"{prefix}.w2", ffn, h)
        zeros(f"{prefix}.b2", h)

    def ln(prefix):
        ones(f"{prefix}.gain", h)
        zeros(f"{prefix}.bias", h)

    emb("embed.tokens", v)
    emb("embed.enc_pos", cfg.max_positions)
    emb("embed.dec_pos", cfg.max_positions)
    if not cfg.share_embeddings:
        mat("out.proj", v, h)
    for i in range(cfg.enc_layers):
        attn(f"enc.{i}.self")
        ffn_block(f"enc.{i}.ffn")
        ln(f"enc.{i}.ln1")
        ln(f"enc.{i}.ln2")
    for i in range(cfg.dec_layers):
        attn(f"dec.{i}.self")
        attn(f"dec.{i}.cross")
        ffn_block(f"dec.{i}.ffn")
        ln(f"dec.{i}.ln1")
        ln(f"dec.{i}.ln2")
        ln(f"dec.{i}.ln3")
    ln("enc.final_ln")
    ln("dec.final_ln")
    return Model(cfg, params)


def clone_model(model: Model) -> Model:
    """Independent copy: same config, deep-copied parameters."""
    params = {
        name: nc.Tensor(t.data.copy(), requires_grad=t.requires_grad)
        for name, t in model.params.items()
    }
    return Model(model.cfg, params)


# --- checkpoints ---


def save_model(model: Model, path: str, extra_meta=None, extra_tensors=None) -> None:
    """Checkpoint: config + all parameters, optional trainer state."""
    meta = {
        "kind": "model",
        "config": model.cfg.to_dict(),
        "ln_eps": LN_EPS,
    }
    if extra_meta:
        overlap = set(extra_meta) & set(meta)
        if overlap:
            raise ConfigError(f"extra metadata collides with reserved keys {sorted(overlap)}")
        meta.update(extra_meta)
    tensors = {name: t.data for name, t in model.params.items()}
    if extra_tensors:
        for name, arr in extra_tensors.items():
            if name in tensors:
                raise ConfigError(f"extra tensor name collides with parameter {name!r}")
            tensors[name] = arr
    write_archive(path, MAGIC_MODEL, meta, tensors)


def load_model(path: str):
    """Returns (model, metadata, extra_tensors)."""
    meta, tensors = read_archive(path, MAGIC_MODEL)
    if meta.get("kind") != "model":
        raise DataError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(meta.get("config", {}))
    model = build_model(cfg, seed=0)
    extras = {}
    for name, arr in tensors.items():
        if name not in model.params:
            extras[name] = arr
            continue
        want = model.params[name].data.shape
        if arr.shape != want:
            raise DataError(
                f"{path}: parameter {name!r} has shape {arr.shape}, expected {want}"
            )
        model.params[name].data[...] = arr
    missing = [n for n in model.params if n not in tensors]
    if missing:
        raise DataError(f"{path}: checkpoint is missing parameters {missing[:3]}...")
    return model, meta, extras
