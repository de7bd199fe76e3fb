"""Analytic multiply-accumulate counts for dataset-creation pipelines.

Conventions: only multiplies are counted (bias adds, norms and activations are
excluded). A conv layer costs ``out_h * out_w * out_c * (in_c / groups) * k^2``
with ``out = floor((in + 2 * padding - k) / stride) + 1``; every kernel tap is
counted, including taps that land on zero padding. A transposed conv scatters
each input pixel over ``k^2`` taps: ``in_h * in_w * in_c * (out_c / groups) * k^2``. Attention over ``t`` query
tokens of width ``d`` with ``tc`` context tokens of width ``dc`` costs
``2 * t * d^2`` (query and output projections) + ``2 * tc * dc * d`` (key and
value projections) + ``2 * t * tc * d`` (scores and weighted sum); for
self-attention this is ``4 t d^2 + 2 t^2 d``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, Union

import torch
from torch import nn

from .errors import AccountingError


@dataclass(frozen=True)
class ConvLayer:
    in_c: int
    out_c: int
    k: int
    stride: int
    in_h: int
    in_w: int
    padding: int | None = None  # None means k // 2 ("same" for odd k, stride 1)
    groups: int = 1

    @property
    def pad(self) -> int:
        return self.k // 2 if self.padding is None else self.padding

    def out_hw(self) -> tuple[int, int]:
        oh = (self.in_h + 2 * self.pad - self.k) // self.stride + 1
        ow = (self.in_w + 2 * self.pad - self.k) // self.stride + 1
        return oh, ow


@dataclass(frozen=True)
class ConvTransposeLayer:
    in_c: int
    out_c: int
    k: int
    stride: int
    in_h: int
    in_w: int
    padding: int = 0
    groups: int = 1

    def out_hw(self) -> tuple[int, int]:
        oh = (self.in_h - 1) * self.stride - 2 * self.padding + self.k
        ow = (self.in_w - 1) * self.stride - 2 * self.padding + self.k
        return oh, ow


@dataclass(frozen=True)
class LinearLayer:
    in_dim: int
    out_dim: int
    tokens: int = 1


@dataclass(frozen=True)
class AttentionLayer:
    dim: int
    heads: int
    tokens: int
    context_tokens: int | None = None
    context_dim: int | None = None


Layer = Union[ConvLayer, ConvTransposeLayer, LinearLayer, AttentionLayer]
_KINDS = {"conv": ConvLayer, "conv_transpose": ConvTransposeLayer, "linear": LinearLayer,
          "attention": AttentionLayer}
_KIND_OF = {v: k for k, v in _KINDS.items()}


@dataclass
class NetworkCostConfig:
    name: str
    layers: list[Layer] = field(default_factory=list)

    def total(self) -> int:
        return sum(macs_for_layer(d) for d in self.layers)

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name,
                "layers": [{"type": _KIND_OF[type(d)], **asdict(d)} for d in self.layers]}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "NetworkCostConfig":
        layers = []
        for item in d["layers"]:
            item = dict(item)
            kind = item.pop("type")
            if kind not in _KINDS:
                raise AccountingError(f"unknown layer type {kind!r}")
            layers.append(_KINDS[kind](**item))
        return cls(d["name"], layers)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NetworkCostConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise AccountingError(f"cannot load cost config {path}: {e}") from e


def macs_for_layer(d: Layer) -> int:
    if isinstance(d, ConvLayer):
        if min(d.in_c, d.out_c, d.k, d.stride, d.in_h, d.in_w, d.groups) < 1 or d.pad < 0:
            raise AccountingError(f"invalid conv descriptor {d}")
        if d.in_c % d.groups or d.out_c % d.groups:
            raise AccountingError(f"channels not divisible by groups in {d}")
        oh, ow = d.out_hw()
        if oh < 1 or ow < 1:
            raise AccountingError(f"conv output is empty for {d}")
        return oh * ow * d.out_c * (d.in_c // d.groups) * d.k * d.k
    if isinstance(d, ConvTransposeLayer):
        if min(d.in_c, d.out_c, d.k, d.stride, d.in_h, d.in_w, d.groups) < 1 or d.padding < 0:
            raise AccountingError(f"invalid transposed conv descriptor {d}")
        if d.in_c % d.groups or d.out_c % d.groups:
            raise AccountingError(f"channels not divisible by groups in {d}")
        if min(d.out_hw()) < 1:
            raise AccountingError(f"transposed conv output is empty for {d}")
        return d.in_h * d.in_w * d.in_c * (d.out_c // d.groups) * d.k * d.k
    if isinstance(d, LinearLayer):
        if min(d.in_dim, d.out_dim, d.tokens) < 1:
            raise AccountingError(f"invalid linear descriptor {d}")
        return d.tokens * d.in_dim * d.out_dim
    if isinstance(d, AttentionLayer):
        t, dim = d.tokens, d.dim
        tc = d.context_tokens if d.context_tokens is not None else t
        dc = d.context_dim if d.context_dim is not None else dim
        if min(t, dim, tc, dc, d.heads) < 1 or dim % d.heads:
            raise AccountingError(f"invalid attention descriptor {d}")
        return 2 * t * dim * dim + 2 * tc * dc * dim + 2 * t * tc * dim
    raise AccountingError(f"unknown layer descriptor {d!r}")


# -- pipelines ---------------------------------------------------------------

@dataclass
class MacReport:
    components: dict[str, int]
    pipelines: dict[str, int]
    n_images: int
    steps: int | None
    ratio: float | None = None  # denoise / reconstruct

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def pipeline_macs(
    ae: tuple[NetworkCostConfig, NetworkCostConfig],
    unet: NetworkCostConfig | None = None,
    text: NetworkCostConfig | None = None,
    steps: int = 50,
    n: int = 1,
    mode: str = "both",
) -> MacReport:
    """denoise = n * (text + steps * unet + dec); reconstruct = n * (enc + dec)."""
    if mode not in ("denoise", "reconstruct", "both"):
        raise AccountingError(f"unknown mode {mode!r}")
    if n < 0:
        raise AccountingError("n must be nonnegative")
    enc, dec = ae
    comps = {"enc": enc.total(), "dec": dec.total()}
    pipes: dict[str, int] = {}
    if mode in ("denoise", "both"):
        if unet is None:
            raise AccountingError("denoise mode needs a U-Net cost config")
        if steps < 1:
            raise AccountingError("denoise mode needs steps >= 1")
        comps["unet"] = unet.total()
        comps["text"] = text.total() if text is not None else 0
        pipes["denoise"] = n * (comps["text"] + steps * comps["unet"] + comps["dec"])
    if mode in ("reconstruct", "both"):
        pipes["reconstruct"] = n * (comps["enc"] + comps["dec"])
    ratio = None
    if "denoise" in pipes and pipes.get("reconstruct"):
        ratio = pipes["denoise"] / pipes["reconstruct"]
    return MacReport(comps, pipes, n, steps if "denoise" in pipes else None, ratio)


REFERENCE_FILES = {"enc": "enc.json", "dec": "dec.json", "unet": "unet.json", "text": "text.json"}


def load_configs(directory: str | Path | None = None) -> dict[str, NetworkCostConfig]:
    """Load enc/dec/unet/text configs; ``None`` loads the bundled reference set."""
    out = {}
    for key, fname in REFERENCE_FILES.items():
        if directory is None:
            path = resources.files("reconalign") / "data" / "macs" / fname
            if not path.is_file():
                continue
            out[key] = NetworkCostConfig.from_json(json.loads(path.read_text(encoding="utf-8")))
        else:
            p = Path(directory) / fname
            if p.is_file():
                out[key] = NetworkCostConfig.load(p)
    if "enc" not in out or "dec" not in out:
        raise AccountingError(f"cost configs in {directory or 'package data'} lack enc.json/dec.json")
    return out


# -- tracing torch modules ---------------------------------------------------

def trace_layers(module: nn.Module, fn: Callable[[nn.Module, torch.Tensor], Any],
                 input_shape: Sequence[int], name: str) -> NetworkCostConfig:
    """Record conv/linear/attention descriptors by running ``fn(module, x)`` on the meta device.

    Submodules exposing ``attention_descriptor(input_shape)`` are recorded as a
    single attention layer; the convs or linears inside them are not counted again.
    """
    meta = copy.deepcopy(module).to("meta")
    layers: list[Layer] = []
    depth = [0]
    handles = []

    def conv_hook(mod: nn.Conv2d, inputs, output):
        if depth[0]:
            return
        x = inputs[0]
        kh, kw = mod.kernel_size
        sh, sw = mod.stride
        ph, pw = mod.padding if isinstance(mod.padding, tuple) else (0, 0)
        if kh != kw or sh != sw or ph != pw:
            raise AccountingError(f"non-square conv {mod} is not supported")
        layers.append(ConvLayer(mod.in_channels, mod.out_channels, kh, sh, x.shape[-2], x.shape[-1], ph, mod.groups))

    def convt_hook(mod: nn.ConvTranspose2d, inputs, output):
        if depth[0]:
            return
        x = inputs[0]
        kh, kw = mod.kernel_size
        sh, sw = mod.stride
        ph, pw = mod.padding
        if kh != kw or sh != sw or ph != pw:
            raise AccountingError(f"non-square transposed conv {mod} is not supported")
        layers.append(ConvTransposeLayer(mod.in_channels, mod.out_channels, kh, sh, x.shape[-2], x.shape[-1],
                                         ph, mod.groups))

    def linear_hook(mod: nn.Linear, inputs, output):
        if depth[0]:
            return
        x = inputs[0]
        tokens = x.numel() // x.shape[-1] if x.dim() > 1 else 1
        layers.append(LinearLayer(mod.in_features, mod.out_features, tokens))

    def attn_pre(mod, inputs):
        if not depth[0]:
            layers.append(mod.attention_descriptor(tuple(inputs[0].shape)))
        depth[0] += 1

    def attn_post(mod, inputs, output):
        depth[0] -= 1

    for m in meta.modules():
        if hasattr(m, "attention_descriptor"):
            handles.append(m.register_forward_pre_hook(attn_pre))
            handles.append(m.register_forward_hook(attn_post))
        elif isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.ConvTranspose2d):
            handles.append(m.register_forward_hook(convt_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    try:
        with torch.no_grad():
            fn(meta, torch.empty(*input_shape, device="meta"))
    finally:
        for h in handles:
            h.remove()
    return NetworkCostConfig(name, layers)


# -- reference inventories for the LDM family --------------------------------

def _resblock(layers: list[Layer], cin: int, cout: int, h: int, w: int, emb_dim: int | None) -> None:
    layers.append(ConvLayer(cin, cout, 3, 1, h, w))
    if emb_dim is not None:
        layers.append(LinearLayer(emb_dim, cout))
    layers.append(ConvLayer(cout, cout, 3, 1, h, w))
    if cin != cout:
        layers.append(ConvLayer(cin, cout, 1, 1, h, w))


def _transformer(layers: list[Layer], c: int, h: int, w: int, heads: int,
                 context_tokens: int, context_dim: int) -> None:
    t = h * w
    layers.append(ConvLayer(c, c, 1, 1, h, w))  # proj_in
    layers.append(AttentionLayer(c, heads, t))
    layers.append(AttentionLayer(c, heads, t, context_tokens, context_dim))
    layers.append(LinearLayer(c, 8 * c, t))  # GEGLU input projection (value and gate)
    layers.append(LinearLayer(4 * c, c, t))
    layers.append(ConvLayer(c, c, 1, 1, h, w))  # proj_out


def unet_reference(latent_h: int, latent_w: int, in_c: int = 4, base: int = 320,
                   mult: Sequence[int] = (1, 2, 4, 4), res_blocks: int = 2,
                   attn_levels: Iterable[int] = (0, 1, 2), heads: int = 8,
                   context_tokens: int = 77, context_dim: int = 768) -> NetworkCostConfig:
    """Layer inventory of a text-conditioned LDM U-Net (SD 1.x layout)."""
    attn_levels = set(attn_levels)
    emb = base * 4
    L: list[Layer] = [LinearLayer(base, emb), LinearLayer(emb, emb)]
    h, w = latent_h, latent_w
    L.append(ConvLayer(in_c, base, 3, 1, h, w))
    skips = [base]
    ch = base
    for lvl, m in enumerate(mult):
        for _ in range(res_blocks):
            _resblock(L, ch, base * m, h, w, emb)
            ch = base * m
            if lvl in attn_levels:
                _transformer(L, ch, h, w, heads, context_tokens, context_dim)
            skips.append(ch)
        if lvl != len(mult) - 1:
            L.append(ConvLayer(ch, ch, 3, 2, h, w, padding=1))
            h, w = (h + 1) // 2, (w + 1) // 2
            skips.append(ch)
    _resblock(L, ch, ch, h, w, emb)
    _transformer(L, ch, h, w, heads, context_tokens, context_dim)
    _resblock(L, ch, ch, h, w, emb)
    for lvl in reversed(range(len(mult))):
        for i in range(res_blocks + 1):
            _resblock(L, ch + skips.pop(), base * mult[lvl], h, w, emb)
            ch = base * mult[lvl]
            if lvl in attn_levels:
                _transformer(L, ch, h, w, heads, context_tokens, context_dim)
        if lvl != 0:
            h, w = h * 2, w * 2
            L.append(ConvLayer(ch, ch, 3, 1, h, w))
    L.append(ConvLayer(base, in_c, 3, 1, h, w))
    return NetworkCostConfig("ldm-unet", L)


def text_encoder_reference(layers: int = 12, width: int = 768, heads: int = 12,
                           tokens: int = 77, mlp_ratio: int = 4) -> NetworkCostConfig:
    """Layer inventory of a CLIP-style causal text transformer."""
    L: list[Layer] = []
    for _ in range(layers):
        L.append(AttentionLayer(width, heads, tokens))
        L.append(LinearLayer(width, mlp_ratio * width, tokens))
        L.append(LinearLayer(mlp_ratio * width, width, tokens))
    return NetworkCostConfig("clip-text", L)


def write_reference_configs(directory: str | Path, image_side: int = 256) -> dict[str, Path]:
    """Regenerate the bundled reference configs for square ``image_side`` images."""
    from .reconstruction.ldm import LdmAutoencoderKL, LdmConfig

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ae = LdmAutoencoderKL(LdmConfig())
    f = ae.downsample_factor
    configs = {
        "enc": trace_layers(ae, lambda m, x: m.encode(x), (1, 3, image_side, image_side), "ldm-kl-f8-encoder"),
        "dec": trace_layers(ae, lambda m, z: m.decode(z),
                            (1, ae.latent_channels, image_side // f, image_side // f), "ldm-kl-f8-decoder"),
        "unet": unet_reference(image_side // f, image_side // f),
        "text": text_encoder_reference(),
    }
    out = {}
    for key, cfg in configs.items():
        p = directory / REFERENCE_FILES[key]
        cfg.save(p)
        out[key] = p
    return out
