"""Denoising adapter layers, per-language sets, registry, composition.

An adapter is a bottleneck residual block D(z) = W_up^T ReLU(W_down^T
LN(z) + b_down) + b_up + z with its own learned layer norm.  A language
owns one adapter per encoder layer and one per decoder layer; at
inference the source language's encoder stack is combined with the
target language's decoder stack.  Sets serialize to the DADP container
bit-exactly and carry the fingerprint of the model they were trained
against.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .corpus import LanguageId
from .errors import ConfigError, DataError, IncompatibilityError, MissingAdapterError
from .tensorio import MAGIC_ADAPTER, read_archive, write_archive
from .utils import derive_rng

LN_EPS = 1e-5


@dataclass
class AdapterLayer:
    """One bottleneck adapter: h -> b -> h with residual."""

    ln_gain: nc.Tensor
    ln_bias: nc.Tensor
    w_down: nc.Tensor
    b_down: nc.Tensor
    w_up: nc.Tensor
    b_up: nc.Tensor
    hidden: int
    bottleneck: int

    def named(self, prefix):
        return {
            f"{prefix}.ln_gain": self.ln_gain,
            f"{prefix}.ln_bias": self.ln_bias,
            f"{prefix}.w_down": self.w_down,
            f"{prefix}.b_down": self.b_down,
            f"{prefix}.w_up": self.w_up,
            f"{prefix}.b_up": self.b_up,
        }


def new_adapter_layer(hidden, bottleneck, rng):
    """Down-projection small-random, up-projection zero: exact identity."""
    return AdapterLayer(
        ln_gain=nc.Tensor(np.ones(hidden, dtype=np.float32), requires_grad=True),
        ln_bias=nc.Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        w_down=nc.Tensor(
            (rng.normal(size=(hidden, bottleneck)) * 0.01).astype(np.float32),
            requires_grad=True,
        ),
        b_down=nc.Tensor(np.zeros(bottleneck, dtype=np.float32), requires_grad=True),
        w_up=nc.Tensor(np.zeros((bottleneck, hidden), dtype=np.float32), requires_grad=True),
        b_up=nc.Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        hidden=hidden,
        bottleneck=bottleneck,
    )


def adapter_forward(z, layer: AdapterLayer):
    """Apply one adapter to states shaped (..., h)."""
    if z.data.shape[-1] != layer.hidden:
        raise IncompatibilityError(
            f"adapter expects h={layer.hidden}, states have {z.data.shape[-1]}"
        )
    x = nc.layer_norm(z, layer.ln_gain, layer.ln_bias, eps=LN_EPS)
    x = nc.relu(nc.linear(x, layer.w_down, layer.b_down))
    x = nc.linear(x, layer.w_up, layer.b_up)
    return nc.add(x, z)


@dataclass
class AdapterSet:
    """All adapters one language owns, plus an optional per-language
    additive update to the vocabulary projection (new-language mode)."""

    language: LanguageId
    encoder_stack: list
    decoder_stack: list
    parent_fingerprint: str
    hidden: int
    bottleneck: int
    output_projection_delta: nc.Tensor | None = None

    def named_params(self):
        out = {}
        for i, layer in enumerate(self.encoder_stack):
            out.update(layer.named(f"adapter.enc.{i}"))
        for i, layer in enumerate(self.decoder_stack):
            out.update(layer.named(f"adapter.dec.{i}"))
        if self.output_projection_delta is not None:
            out["adapter.output_delta"] = self.output_projection_delta
        return out

    def checksum(self):
        from .utils import sha256_hex

        params = self.named_params()
        return sha256_hex(b"".join(params[name].data.tobytes() for name in sorted(params)))


def new_adapter_set(model, language: LanguageId, bottleneck: int, seed: int, with_output_delta: bool = False) -> AdapterSet:
    """Fresh identity set sized for the given model."""
    if bottleneck < 1:
        raise ConfigError(f"bottleneck must be >= 1, got {bottleneck}")
    h = model.cfg.hidden
    rng = derive_rng(seed, "adapters", language.code)
    enc = [new_adapter_layer(h, bottleneck, rng) for _ in range(model.cfg.enc_layers)]
    dec = [new_adapter_layer(h, bottleneck, rng) for _ in range(model.cfg.dec_layers)]
    delta = None
    if with_output_delta:
        delta = nc.Tensor(
            np.zeros((model.cfg.vocab_size, h), dtype=np.float32), requires_grad=True
        )
    return AdapterSet(
        language=language,
        encoder_stack=enc,
        decoder_stack=dec,
        parent_fingerprint=model.fingerprint(),
        hidden=h,
        bottleneck=bottleneck,
        output_projection_delta=delta,
    )


def _clone_tensor(t):
    return nc.Tensor(t.data.copy(), requires_grad=t.requires_grad)


def clone_adapter_set(aset: AdapterSet) -> AdapterSet:
    """Independent copy sharing nothing mutable with the original."""
    def clone_stack(stack):
        return [
            AdapterLayer(
                ln_gain=_clone_tensor(l.ln_gain),
                ln_bias=_clone_tensor(l.ln_bias),
                w_down=_clone_tensor(l.w_down),
                b_down=_clone_tensor(l.b_down),
                w_up=_clone_tensor(l.w_up),
                b_up=_clone_tensor(l.b_up),
                hidden=l.hidden,
                bottleneck=l.bottleneck,
            )
            for l in stack
        ]

    delta = aset.output_projection_delta
    return AdapterSet(
        language=aset.language,
        encoder_stack=clone_stack(aset.encoder_stack),
        decoder_stack=clone_stack(aset.decoder_stack),
        parent_fingerprint=aset.parent_fingerprint,
        hidden=aset.hidden,
        bottleneck=aset.bottleneck,
        output_projection_delta=None if delta is None else _clone_tensor(delta),
    )


@dataclass
class ActiveSelection:
    """Call-scoped binding: source-side encoder adapters, target-side
    decoder adapters, optional output-projection delta of the target."""

    source_language: LanguageId
    target_language: LanguageId
    encoder_adapters: list | None
    decoder_adapters: list | None
    output_delta: nc.Tensor | None = None
    parent_fingerprint: str | None = None


class AdapterRegistry:
    """Language-keyed adapter sets, pinned to one parent model."""

    def __init__(self, parent_fingerprint: str | None = None):
        self.parent_fingerprint = parent_fingerprint
        self._sets = {}

    def add(self, aset: AdapterSet, replace: bool = False):
        if self.parent_fingerprint is not None and aset.parent_fingerprint != self.parent_fingerprint:
            raise IncompatibilityError(
                f"adapter set for '{aset.language.code}' was trained against a different model"
            )
        if not replace and aset.language.code in self._sets:
            raise ConfigError(f"adapter set for '{aset.language.code}' already registered")
        self._sets[aset.language.code] = aset
        return aset

    def get(self, code: str) -> AdapterSet:
        try:
            return self._sets[code]
        except KeyError:
            raise MissingAdapterError(f"no adapter set for language '{code}'") from None

    def __contains__(self, code):
        return code in self._sets

    def languages(self):
        return list(self._sets)


def compose(registry: AdapterRegistry, source_language: str, target_language: str) -> ActiveSelection:
    """Source encoder adapters + target decoder adapters (+ target delta)."""
    src = registry.get(source_language)
    tgt = registry.get(target_language)
    if src.parent_fingerprint != tgt.parent_fingerprint:
        raise IncompatibilityError(
            f"adapter sets '{source_language}' and '{target_language}' "
            "come from different parent models"
        )
    return ActiveSelection(
        source_language=src.language,
        target_language=tgt.language,
        encoder_adapters=src.encoder_stack,
        decoder_adapters=tgt.decoder_stack,
        output_delta=tgt.output_projection_delta,
        parent_fingerprint=src.parent_fingerprint,
    )


# --- serialization ---


def save_adapter_set(aset: AdapterSet, path: str) -> None:
    meta = {
        "kind": "adapter_set",
        "language": {"code": aset.language.code, "role": aset.language.role},
        "hidden": aset.hidden,
        "bottleneck": aset.bottleneck,
        "enc_layers": len(aset.encoder_stack),
        "dec_layers": len(aset.decoder_stack),
        "parent_fingerprint": aset.parent_fingerprint,
        "ln_eps": LN_EPS,
    }
    tensors = {name: t.data for name, t in aset.named_params().items()}
    write_archive(path, MAGIC_ADAPTER, meta, tensors)


def load_adapter_set(path: str) -> AdapterSet:
    meta, tensors = read_archive(path, MAGIC_ADAPTER)
    try:
        lang = LanguageId(meta["language"]["code"], meta["language"]["role"])
        h = int(meta["hidden"])
        b = int(meta["bottleneck"])
        enc_layers = int(meta["enc_layers"])
        dec_layers = int(meta["dec_layers"])
        fingerprint = meta["parent_fingerprint"]
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: incomplete adapter metadata ({e})") from None

    def take(name, shape):
        if name not in tensors:
            raise DataError(f"{path}: missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {shape}"
            )
        return nc.Tensor(arr, requires_grad=True)

    def load_stack(side, count):
        stack = []
        for i in range(count):
            p = f"adapter.{side}.{i}"
            stack.append(
                AdapterLayer(
                    ln_gain=take(f"{p}.ln_gain", (h,)),
                    ln_bias=take(f"{p}.ln_bias", (h,)),
                    w_down=take(f"{p}.w_down", (h, b)),
                    b_down=take(f"{p}.b_down", (b,)),
                    w_up=take(f"{p}.w_up", (b, h)),
                    b_up=take(f"{p}.b_up", (h,)),
                    hidden=h,
                    bottleneck=b,
                )
            )
        return stack

    delta = None
    if "adapter.output_delta" in tensors:
        arr = tensors["adapter.output_delta"]
        if arr.ndim != 2 or arr.shape[1] != h:
            raise DataError(f"{path}: malformed output delta shape {arr.shape}")
        delta = nc.Tensor(arr, requires_grad=True)
    return AdapterSet(
        language=lang,
        encoder_stack=load_stack("enc", enc_layers),
        decoder_stack=load_stack("dec", dec_layers),
        parent_fingerprint=fingerprint,
        hidden=h,
        bottleneck=b,
        output_projection_delta=delta,
    )
