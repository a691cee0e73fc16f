"""U-Net submodule and the multi-scale kU-Net built from it.

Every U-Net here uses same-padded 3x3 convolutions, so its output feature map
has the input's spatial extent. kU-Net runs U-Net-k on the coarsest level of a
max-pooling pyramid first and feeds each result into the next finer U-Net.
The fusion mode decides where the coarse features enter:

``A``  coarse output, concatenated after the finer net's first encoder stage
``B``  coarse output, concatenated after its last decoder stage
``C``  coarse bottleneck, concatenated at the finer bottleneck
``D``  every coarse encoder/bottleneck/decoder map at the commensurate stage

Injected maps are upsampled 2x by a learned 2x2 transposed convolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import autograd as ag
from .errors import ConfigError, DimensionError

FUSION_MODES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 2
    base_channels: int = 8
    kernel: int = 3
    padding: str = "same"
    out_channels: int = 64
    in_channels: int = 1

    def stage_channels(self, s):
        return self.base_channels * 2 ** s


@dataclass(frozen=True)
class KUNetConfig:
    k: int = 2
    fusion: str = "A"
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")
        if self.unet.padding != "same":
            raise ConfigError("kU-Net needs same-padded U-Nets")


def injection_points(cfg, fusion):
    """Stages of the finer U-Net that receive coarse features, with the tap they come from."""
    d = cfg.depth
    if fusion == "A":
        return {"enc0": "out"}
    if fusion == "B":
        return {"dec0": "out"}
    if fusion == "C":
        return {"bottleneck": "bottleneck"}
    if fusion == "D":
        pts = {f"enc{s}": f"enc{s}" for s in range(d)}
        pts["bottleneck"] = "bottleneck"
        pts.update({f"dec{s}": f"dec{s}" for s in range(d)})
        return pts
    raise ConfigError(f"unknown fusion mode {fusion!r}")


def tap_channels(cfg, injected_channels=None):
    """Channel count of every tap of a U-Net (after any injection concatenated there)."""
    inj = injected_channels or {}
    ch = {}
    for s in range(cfg.depth):
        ch[f"enc{s}"] = cfg.stage_channels(s) + inj.get(f"enc{s}", 0)
    ch["bottleneck"] = cfg.stage_channels(cfg.depth) + inj.get("bottleneck", 0)
    for s in range(cfg.depth):
        ch[f"dec{s}"] = cfg.stage_channels(s) + inj.get(f"dec{s}", 0)
    ch["out"] = cfg.out_channels
    return ch


def unet_param_spec(cfg, prefix, injected_channels=None):
    """``name -> (shape, init kind)`` for one U-Net."""
    k = cfg.kernel
    ch = tap_channels(cfg, injected_channels)
    spec = {}

    def conv(name, cin, cout, ksz=k):
        spec[f"{prefix}.{name}.w"] = ((cout, cin, ksz, ksz), "he")
        spec[f"{prefix}.{name}.b"] = ((cout,), "zero")

    cin = cfg.in_channels
    for s in range(cfg.depth):
        c = cfg.stage_channels(s)
        conv(f"enc{s}.conv0", cin, c)
        conv(f"enc{s}.conv1", c, c)
        cin = ch[f"enc{s}"]
    c = cfg.stage_channels(cfg.depth)
    conv("bottleneck.conv0", cin, c)
    conv("bottleneck.conv1", c, c)
    cin = ch["bottleneck"]
    for s in reversed(range(cfg.depth)):
        c = cfg.stage_channels(s)
        spec[f"{prefix}.dec{s}.up.w"] = ((c, cin, 2, 2), "he_deconv")
        spec[f"{prefix}.dec{s}.up.b"] = ((c,), "zero")
        conv(f"dec{s}.conv0", c + ch[f"enc{s}"], c)
        conv(f"dec{s}.conv1", c, c)
        cin = ch[f"dec{s}"]
    conv("out", cin, cfg.out_channels, 1)
    return spec


def _conv_relu(x, params, name, padding):
    return ag.relu(ag.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding))


def _check_divisible(h, w, factor, what):
    if h % factor or w % factor:
        raise DimensionError(f"{what}: extents {h}x{w} must be divisible by {factor}")


def unet_forward(image, params, cfg, injected=None, prefix="unet", return_taps=False):
    """Encoder-decoder with skip concatenations; ``C x H x W`` -> ``out_channels x H x W``.

    ``injected`` maps a tap name to an already-upsampled feature map that is
    concatenated onto that stage's output.
    """
    injected = injected or {}
    c, h, w = ag.value(image).shape
    if c != cfg.in_channels:
        raise DimensionError(f"U-Net expects {cfg.in_channels} input channels, got {c}")
    _check_divisible(h, w, 2 ** cfg.depth, "U-Net input")
    pad = cfg.padding
    taps = {}

    def inject(name, x):
        if name not in injected:
            return x
        extra = injected[name]
        if ag.value(extra).shape[1:] != ag.value(x).shape[1:]:
            raise DimensionError(
                f"injection at stage {name}: extent {ag.value(extra).shape[1:]} vs "
                f"{ag.value(x).shape[1:]}"
            )
        return ag.concat_channels(x, extra)

    x = image
    skips = []
    for s in range(cfg.depth):
        x = _conv_relu(x, params, f"{prefix}.enc{s}.conv0", pad)
        x = _conv_relu(x, params, f"{prefix}.enc{s}.conv1", pad)
        x = inject(f"enc{s}", x)
        taps[f"enc{s}"] = x
        skips.append(x)
        x = ag.max_pool2(x)
    x = _conv_relu(x, params, f"{prefix}.bottleneck.conv0", pad)
    x = _conv_relu(x, params, f"{prefix}.bottleneck.conv1", pad)
    x = inject("bottleneck", x)
    taps["bottleneck"] = x
    for s in reversed(range(cfg.depth)):
        x = ag.deconv2(x, params[f"{prefix}.dec{s}.up.w"], params[f"{prefix}.dec{s}.up.b"])
        skip = skips[s]
        if ag.value(skip).shape[1:] != x.shape[1:]:
            raise DimensionError(f"skip at stage dec{s}: {ag.value(skip).shape} vs {x.shape}")
        x = ag.concat_channels(x, skip)
        x = _conv_relu(x, params, f"{prefix}.dec{s}.conv0", pad)
        x = _conv_relu(x, params, f"{prefix}.dec{s}.conv1", pad)
        x = inject(f"dec{s}", x)
        taps[f"dec{s}"] = x
    out = _conv_relu(x, params, f"{prefix}.out", "valid")
    taps["out"] = out
    return (out, taps) if return_taps else out


def build_scale_pyramid(image, k):
    """``[I_1, ..., I_k]`` with ``I_t`` the ``(t-1)``-times 2x2 max-pooled image."""
    _, h, w = ag.value(image).shape
    _check_divisible(h, w, 2 ** (k - 1), "scale pyramid")
    levels = [image]
    for _ in range(k - 1):
        levels.append(ag.max_pool2(levels[-1]))
    return levels


def kunet_param_spec(cfg, prefix="fcn"):
    spec = {}
    points = injection_points(cfg.unet, cfg.fusion)
    for t in range(cfg.k, 0, -1):
        inj = {}
        if t < cfg.k:
            coarse = tap_channels(cfg.unet, _injected_channels(cfg, t + 1))
            for dst, src in points.items():
                c = coarse[src]
                inj[dst] = c
                spec[f"{prefix}.u{t}.inj.{dst}.w"] = ((c, c, 2, 2), "he_deconv")
                spec[f"{prefix}.u{t}.inj.{dst}.b"] = ((c,), "zero")
        spec.update(unet_param_spec(cfg.unet, f"{prefix}.u{t}", inj))
    return spec


def _injected_channels(cfg, t):
    if t >= cfg.k:
        return {}
    coarse = tap_channels(cfg.unet, _injected_channels(cfg, t + 1))
    return {dst: coarse[src] for dst, src in injection_points(cfg.unet, cfg.fusion).items()}


def kunet_forward(image, params, cfg, prefix="fcn"):
    """Coarsest-to-finest chain of U-Nets; returns U-Net-1's feature map."""
    _, h, w = ag.value(image).shape
    _check_divisible(h, w, 2 ** (cfg.k - 1 + cfg.unet.depth), "kU-Net input")
    pyramid = build_scale_pyramid(image, cfg.k)
    points = injection_points(cfg.unet, cfg.fusion)
    taps = None
    out = None
    for t in range(cfg.k, 0, -1):
        injected = {}
        if taps is not None:
            for dst, src in points.items():
                name = f"{prefix}.u{t}.inj.{dst}"
                injected[dst] = ag.deconv2(taps[src], params[f"{name}.w"], params[f"{name}.b"])
        out, taps = unet_forward(pyramid[t - 1], params, cfg.unet, injected,
                                 prefix=f"{prefix}.u{t}", return_taps=True)
    return out


def head_param_spec(cfg, prefix="fcn"):
    return {
        f"{prefix}.head.w": ((2, cfg.unet.out_channels, 1, 1), "he"),
        f"{prefix}.head.b": ((2,), "zero"),
    }


def fcn_param_spec(cfg, prefix="fcn"):
    """kU-Net plus the 1x1 two-class head used when the FCN segments on its own."""
    spec = kunet_param_spec(cfg, prefix)
    spec.update(head_param_spec(cfg, prefix))
    return spec


def fcn_logits(image, params, cfg, prefix="fcn"):
    feats = kunet_forward(image, params, cfg, prefix)
    return ag.conv2d(feats, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"], "valid")


def param_count(spec):
    n = 0
    for shape, _ in spec.values():
        m = 1
        for e in shape:
            m *= e
        n += m
    return n
