"""Semi-dense 3D FCNN: construction, forward pass, checkpoints, counting.

Nine valid-convolution layers (kernel 3^3) feed every layer's center-cropped
feature maps into the first of three 1^3-convolution fc layers, then a bare
classification convolution and a channel softmax. Early fusion stacks the
modalities as input channels of one path; late fusion runs one path per
modality and concatenates both paths' feature maps before fc1.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"VSEG"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    fusion: str = "early"
    conv_kernels_per_layer: tuple = (25, 25, 25, 50, 50, 50, 75, 75, 75)
    kernel_size: int = 3
    fc_units: tuple = (400, 200, 150)
    num_classes: int = 4
    modalities: int = 2
    scale_factor: float = 1.0

    def __post_init__(self):
        self.conv_kernels_per_layer = tuple(int(m) for m in self.conv_kernels_per_layer)
        self.fc_units = tuple(int(u) for u in self.fc_units)
        if self.fusion not in ("early", "late"):
            raise ConfigError(f"fusion must be 'early' or 'late', got {self.fusion!r}")
        if len(self.conv_kernels_per_layer) != 9:
            raise ConfigError("the architecture uses exactly 9 convolutional layers")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.num_classes < 2 or self.modalities < 1:
            raise ConfigError("need >=2 classes and >=1 modality")
        if self.scale_factor <= 0:
            raise ConfigError(f"scale_factor must be positive, got {self.scale_factor}")
        for name, widths in (("conv", self.scaled_conv_widths()), ("fc", self.scaled_fc_units())):
            if any(w == 0 for w in widths):
                raise ConfigError(
                    f"scale_factor {self.scale_factor} collapses a {name} layer to zero width: {widths}")

    def _scale(self, widths):
        return tuple(int(np.floor(w * self.scale_factor + 0.5)) for w in widths)

    def scaled_conv_widths(self):
        return self._scale(self.conv_kernels_per_layer)

    def scaled_fc_units(self):
        return self._scale(self.fc_units)

    @property
    def num_paths(self):
        return 1 if self.fusion == "early" else self.modalities

    @property
    def path_input_channels(self):
        return self.modalities if self.fusion == "early" else 1

    def concat_channels(self):
        return self.num_paths * sum(self.scaled_conv_widths())

    @property
    def min_input_side(self):
        return 9 * (self.kernel_size - 1) + 1

    @property
    def shrink(self):
        """Total spatial reduction from input to output (9 layers x (k-1))."""
        return 9 * (self.kernel_size - 1)

    def to_dict(self):
        return {
            "fusion": self.fusion,
            "conv_kernels_per_layer": list(self.conv_kernels_per_layer),
            "kernel_size": self.kernel_size,
            "fc_units": list(self.fc_units),
            "num_classes": self.num_classes,
            "modalities": self.modalities,
            "scale_factor": self.scale_factor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            fusion=d["fusion"],
            conv_kernels_per_layer=tuple(d["conv_kernels_per_layer"]),
            kernel_size=d["kernel_size"],
            fc_units=tuple(d["fc_units"]),
            num_classes=d["num_classes"],
            modalities=d["modalities"],
            scale_factor=d["scale_factor"],
        )


class ConvBlock:
    """Pre-activation block: BN -> PReLU -> conv. First blocks skip BN/PReLU."""

    def __init__(self, name, cin, cout, ksize, rng, dtype, preactivation):
        self.name = name
        self.preactivation = preactivation
        if preactivation:
            self.bn_gamma = ad.Parameter(np.ones(cin, dtype), name=f"{name}.bn.gamma")
            self.bn_beta = ad.Parameter(np.zeros(cin, dtype), name=f"{name}.bn.beta")
            self.bn_state = ad.BatchNormState(cin, dtype=dtype)
            self.act_a = ad.Parameter(np.full(cin, 0.25, dtype), name=f"{name}.act.a")
        fan_in = cin * ksize ** 3
        self.w = ad.Parameter(ad.he_init((cout, cin, ksize, ksize, ksize), fan_in, rng, dtype),
                              name=f"{name}.w")
        self.b = ad.Parameter(np.zeros(cout, dtype), name=f"{name}.b")

    def forward(self, x, mode):
        if self.preactivation:
            x = ad.batch_norm(x, self.bn_gamma, self.bn_beta, self.bn_state, mode)
            x = ad.prelu(x, self.act_a)
        return ad.conv3d_valid(x, self.w, self.b)

    def parameters(self):
        if self.preactivation:
            return [self.bn_gamma, self.bn_beta, self.act_a, self.w, self.b]
        return [self.w, self.b]


class Network:
    """Built parameter store plus the ordered blocks of one fusion variant."""

    def __init__(self, config, rng, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        k = config.kernel_size
        conv_widths = config.scaled_conv_widths()
        fc_widths = config.scaled_fc_units()

        self.paths = []
        for p in range(config.num_paths):
            prefix = f"path{p}." if config.num_paths > 1 else ""
            cin = config.path_input_channels
            blocks = []
            for l, cout in enumerate(conv_widths, start=1):
                blocks.append(ConvBlock(f"{prefix}conv{l}", cin, cout, k, rng, dtype,
                                        preactivation=(l > 1)))
                cin = cout
            self.paths.append(blocks)

        cin = config.concat_channels()
        self.fc_blocks = []
        for i, cout in enumerate(fc_widths, start=1):
            self.fc_blocks.append(ConvBlock(f"fc{i}", cin, cout, 1, rng, dtype, preactivation=True))
            cin = cout
        self.classifier = ConvBlock("classifier", cin, config.num_classes, 1, rng, dtype,
                                    preactivation=False)
        self.seed = None

    def parameters(self):
        params = []
        for blocks in self.paths:
            for blk in blocks:
                params.extend(blk.parameters())
        for blk in self.fc_blocks:
            params.extend(blk.parameters())
        params.extend(self.classifier.parameters())
        return params

    def _blocks_with_bn(self):
        for blocks in self.paths:
            for blk in blocks:
                if blk.preactivation:
                    yield blk
        for blk in self.fc_blocks:
            yield blk

    def bn_initialized(self):
        return all(blk.bn_state.initialized for blk in self._blocks_with_bn())


def build_network(config, rng, dtype=np.float32):
    return Network(config, rng, dtype=dtype)


def crop_and_concat(features, target_spatial=None):
    """Center-crop every feature map to the smallest one and stack channels.

    Feature sides must be >= the target and share its parity so the crop
    centers exactly. Concatenation follows list order.
    """
    if not features:
        raise ad.ShapeError("crop_and_concat: empty feature list")
    if target_spatial is None:
        target_spatial = min((f.data.shape[2:] for f in features), key=lambda s: s[0])
    cropped = [ad.crop_center(f, target_spatial) for f in features]
    return ad.concat_channels(cropped)


def forward_segment(net, segment, mode="infer"):
    """Class probabilities for a (B, modalities, D, H, W) segment.

    Output spatial sides shrink by 18; every voxel's channel vector is a
    softmax distribution over the classes.
    """
    x = segment if isinstance(segment, ad.Tensor) else ad.Tensor(np.asarray(segment, net.dtype))
    cfg = net.config
    if x.data.ndim != 5 or x.data.shape[1] != cfg.modalities:
        raise ad.ShapeError(
            f"forward_segment: expected (B, {cfg.modalities}, D, H, W), got {x.data.shape}")
    min_side = cfg.min_input_side
    for axis, name in zip(range(2, 5), "DHW"):
        if x.data.shape[axis] < min_side:
            raise ad.ShapeError(
                f"forward_segment: input {name}={x.data.shape[axis]} below required minimum {min_side}")

    feats = []
    for p, blocks in enumerate(net.paths):
        # per-path modality slice; gradients w.r.t. the raw segment are not needed
        h = x if cfg.num_paths == 1 else ad.Tensor(np.ascontiguousarray(x.data[:, p:p + 1]))
        path_feats = []
        for blk in blocks:
            h = blk.forward(h, mode)
            path_feats.append(h)
        feats.extend(path_feats)

    target = tuple(s - cfg.shrink for s in x.data.shape[2:])
    merged = crop_and_concat(feats, target)
    h = merged
    for blk in net.fc_blocks:
        h = blk.forward(h, mode)
    logits = net.classifier.forward(h, mode)
    return ad.softmax_channels(logits)


def parameter_count(net):
    """Element counts per layer plus conv / fc / classifier vs BN+PReLU totals."""
    per_layer = {}
    totals = {"conv": 0, "fc": 0, "classifier": 0, "bn": 0, "prelu": 0}
    for p in net.parameters():
        per_layer[p.name] = p.data.size
        if ".bn." in p.name:
            totals["bn"] += p.data.size
        elif ".act." in p.name:
            totals["prelu"] += p.data.size
        elif p.name.startswith("classifier"):
            totals["classifier"] += p.data.size
        elif p.name.startswith("fc"):
            totals["fc"] += p.data.size
        else:
            totals["conv"] += p.data.size
    totals["core_total"] = totals["conv"] + totals["fc"] + totals["classifier"]
    totals["total"] = sum(per_layer.values())
    return {"per_layer": per_layer, **totals}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _named_arrays(net):
    arrays = []
    for p in net.parameters():
        arrays.append((p.name, p.data))
    for blk in net._blocks_with_bn():
        arrays.append((f"{blk.name}.bn.running_mean", blk.bn_state.running_mean))
        arrays.append((f"{blk.name}.bn.running_var", blk.bn_state.running_var))
    return arrays


def save_checkpoint(net, path):
    """Versioned little-endian checkpoint; load(save(net)) is bit-exact."""
    arrays = _named_arrays(net)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "dtype": np.dtype(net.dtype).name,
        "seed": net.seed,
        "bn_initialized": net.bn_initialized(),
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.name} for n, a in arrays],
    }
    blob = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    config = NetworkConfig.from_dict(header["config"])
    dtype = np.dtype(header["dtype"])

    net = Network(config, np.random.default_rng(0), dtype=dtype)
    net.seed = header["seed"]

    offset = 16 + hlen
    values = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(
                f"truncated checkpoint: need {nbytes} bytes for {spec['name']}, "
                f"have {len(raw) - offset}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(spec["shape"])
        values[spec["name"]] = arr.astype(spec["dtype"])
        offset += nbytes

    for p in net.parameters():
        if p.name not in values:
            raise CheckpointError(f"checkpoint missing parameter {p.name}")
        if values[p.name].shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint shape mismatch for {p.name}: {values[p.name].shape} vs {p.data.shape}")
        p.data = np.ascontiguousarray(values[p.name])
        p.grad = np.zeros_like(p.data)
        p.rms_cache = np.zeros_like(p.data)
        p.momentum_cache = np.zeros_like(p.data)
    for blk in net._blocks_with_bn():
        blk.bn_state.running_mean = np.ascontiguousarray(values[f"{blk.name}.bn.running_mean"])
        blk.bn_state.running_var = np.ascontiguousarray(values[f"{blk.name}.bn.running_var"])
        blk.bn_state.initialized = header["bn_initialized"]
    return net
