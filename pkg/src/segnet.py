"""
Toy encoder-decoder segmentation models.

Two topologies share one four-stage convolutional encoder:

- ``fpn``: 1x1 lateral projections to a common pyramid width, a top-down pathway with nearest 2x
  upsampling and three merge levels (quantum FPN gate or classical addition), a 3x3 smoothing conv
  per level and a 3x3 prediction head at input resolution.
- ``unet_skip``: a mirrored decoder with concatenation skips; each skip optionally passes through
  a quantum skip gate.
"""
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

import numpy as np

from src import fusion
from src import tensorgraph as tg
from src.errors import ConfigError, ShapeError
from src.qsim import ENCODING_KINDS
from src.tensorgraph import Node, Parameter

logger = logging.getLogger(__name__)

TOPOLOGIES = ("unet_skip", "fpn")
MERGE_KINDS = ("quantum", "classical", "identity")
INPUT_CHANNELS = (1, 3, 5)
QUBIT_CHOICES = (4, 6)
MAX_RESOLUTION = 128
N_STAGES = 4

# Skip-attention circuit presets.
VARIANTS: Dict[str, dict] = {
    "qdressed_reupload": dict(qubits=4, reupload=True, encoding_scale_kind="unit", skip_placement="all_levels"),
    "qdressed": dict(qubits=4, reupload=False, encoding_scale_kind="unit", skip_placement="all_levels"),
    "qbottleneck": dict(qubits=4, reupload=True, encoding_scale_kind="unit", skip_placement="bottleneck_only"),
    "qbottleneck_6q": dict(qubits=6, reupload=True, encoding_scale_kind="unit", skip_placement="bottleneck_only"),
    "qfourier": dict(qubits=4, reupload=True, encoding_scale_kind="frequency", skip_placement="all_levels"),
}


@dataclass
class ModelConfig:
    """
    Model design space.

    Attributes:
        topology (str): "fpn" or "unet_skip".
        merge_kind (str): "quantum", "classical" (FPN addition) or "identity" (plain skips).
        encoder_widths (list[int]): Channel count of each of the four encoder stages.
        input_channels (int): 5 for the full protocol, 1 or 3 otherwise.
        resolution (int): Square input size, divisible by 16 and at most 128.
        qubits (int): Qubits per gate circuit, 4 or 6.
        layers (int): Variational layers per circuit.
        reupload (bool): Data re-uploading in skip gates (FPN gates always re-upload).
        encoding_scale_kind (str): "unit" or "frequency".
        skip_placement (str): "all_levels" or "bottleneck_only".
        variant (str, optional): Skip-attention preset name; overrides the circuit axes.
    """
    topology: str = "fpn"
    merge_kind: str = "quantum"
    encoder_widths: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    input_channels: int = 5
    resolution: int = 32
    qubits: int = 4
    layers: int = 2
    reupload: bool = True
    encoding_scale_kind: str = "unit"
    skip_placement: str = "all_levels"
    variant: Optional[str] = None

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> "ModelConfig":
        """Applies the variant preset, if any, and validates."""
        config = self
        if self.variant is not None:
            if self.variant not in VARIANTS:
                raise ConfigError(f"Unknown variant '{self.variant}', expected one of {sorted(VARIANTS)}")
            config = replace(self, topology="unet_skip", merge_kind="quantum", **VARIANTS[self.variant])
        config.validate()
        return config

    def validate(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got '{self.topology}'")
        if self.merge_kind not in MERGE_KINDS:
            raise ConfigError(f"merge_kind must be one of {MERGE_KINDS}, got '{self.merge_kind}'")
        if self.topology == "fpn" and self.merge_kind == "identity":
            raise ConfigError("the fpn topology merges with 'quantum' or 'classical', not 'identity'")
        if self.topology == "fpn" and not self.reupload:
            raise ConfigError("FPN gates always re-upload; reupload=false applies to unet_skip gates only")
        if self.topology == "unet_skip" and self.merge_kind == "classical":
            raise ConfigError("classical FPN addition needs topology 'fpn'; use 'identity' for plain skips")
        if len(self.encoder_widths) != N_STAGES or any(int(w) < 1 for w in self.encoder_widths):
            raise ConfigError(f"encoder_widths needs {N_STAGES} positive entries, got {self.encoder_widths}")
        if self.input_channels not in INPUT_CHANNELS:
            raise ConfigError(f"input_channels must be one of {INPUT_CHANNELS}, got {self.input_channels}")
        if self.resolution % 2 ** N_STAGES or not 0 < self.resolution <= MAX_RESOLUTION:
            raise ConfigError(f"resolution must be a multiple of {2 ** N_STAGES} up to {MAX_RESOLUTION}, "
                              f"got {self.resolution}")
        if self.qubits not in QUBIT_CHOICES:
            raise ConfigError(f"qubits must be one of {QUBIT_CHOICES}, got {self.qubits}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.encoding_scale_kind not in ENCODING_KINDS:
            raise ConfigError(f"encoding_scale_kind must be one of {ENCODING_KINDS}")
        if self.skip_placement not in fusion.PLACEMENTS:
            raise ConfigError(f"skip_placement must be one of {fusion.PLACEMENTS}")


class SegModel:
    """
    A built segmentation model: named parameters plus the forward pass for its topology.

    Attributes:
        config (ModelConfig): Resolved configuration.
        seed (int): Initialisation seed; every parameter is drawn from a generator keyed by
            (seed, name), so models that share parameter names share their initial values.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self._params: Dict[str, Parameter] = {}
        self.fpn_gates: Dict[int, fusion.QuantumFpnGate] = {}
        self.skip_gates: Dict[int, fusion.QuantumSkipGate] = {}

    # Parameter registry

    def register(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"Duplicate parameter name '{param.name}'")
        self._params[param.name] = param
        return param

    def add_conv(self, name: str, cin: int, cout: int, k: int) -> None:
        group = "encoder" if name.startswith("encoder.") else "decoder"
        bound = np.sqrt(6.0 / (cin * k * k))
        weight = fusion.param_rng(self.seed, f"{name}.weight").uniform(-bound, bound, size=(cout, cin, k, k))
        self.register(tg.parameter(f"{name}.weight", weight, group))
        self.register(tg.parameter(f"{name}.bias", np.zeros(cout), group))

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> Dict[str, Parameter]:
        return dict(self._params)

    def count(self, group: Optional[str] = None) -> int:
        return sum(p.size for p in self._params.values() if group is None or p.group == group)

    @property
    def quantum_param_count(self) -> int:
        """Variational circuit angles across all gates."""
        return self.count("quantum")

    @property
    def encoding_param_count(self) -> int:
        """FPN gate scale and shift entries."""
        return sum(p.size for name, p in self._params.items() if name.endswith((".scale", ".shift")))

    def gate_parameter_names(self) -> List[str]:
        return [name for name in self._params if ".gate" in name or ".skip_gate" in name]

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.node.zero_grad()

    # Forward

    def conv(self, name: str, x: Node, activate: bool = True) -> Node:
        weight = self._params[f"{name}.weight"].node
        out = tg.conv2d(x, weight, self._params[f"{name}.bias"].node, stride=1, padding=weight.shape[2] // 2)
        return tg.relu(out) if activate else out

    def forward(self, batch) -> Node:
        """
        Computes [B, 1, R, R] logits.

        Raises:
            ShapeError: If the batch does not have config.input_channels channels at config.resolution.
        """
        x = tg.as_node(batch)
        expected = (self.config.input_channels, self.config.resolution, self.config.resolution)
        if x.values.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model expects batches of shape [B, {expected[0]}, {expected[1]}, {expected[2]}], "
                             f"got {x.shape}")
        if self.config.topology == "fpn":
            return self._forward_fpn(x)
        return self._forward_unet(x)

    def _forward_fpn(self, x: Node) -> Node:
        features, h = [], x
        for stage in range(N_STAGES):
            h = tg.maxpool2x(self.conv(f"encoder.stage{stage}.conv", h))
            features.append(h)
        laterals = [self.conv(f"fpn.lateral{i}", f, activate=False) for i, f in enumerate(features)]
        p = laterals[-1]
        for level in reversed(range(N_STAGES - 1)):
            top_down = tg.upsample_nearest2x(p)
            if level in self.fpn_gates:
                merged = fusion.fpn_gate_forward(laterals[level], top_down, self.fpn_gates[level])
            else:
                merged = fusion.classical_fpn_merge(laterals[level], top_down)
            p = self.conv(f"fpn.smooth{level}", merged)
        return self.conv("head.conv", tg.upsample_nearest2x(p), activate=False)

    def _forward_unet(self, x: Node) -> Node:
        skips, h = [], x
        for stage in range(N_STAGES):
            s = self.conv(f"encoder.stage{stage}.conv", h)
            skips.append(s)
            h = tg.maxpool2x(s)
        d = self.conv("encoder.bottleneck.conv", h)
        for level in reversed(range(N_STAGES)):
            d = tg.upsample_nearest2x(d)
            skip = skips[level]
            if level in self.skip_gates:
                skip = fusion.skip_gate_forward(skip, self.skip_gates[level])
            d = self.conv(f"decoder.up{level}.conv", tg.concat([d, skip], axis=1))
        return self.conv("head.conv", d, activate=False)


def build_model(config: ModelConfig, seed: int = 0) -> SegModel:
    """
    Builds the model described by config.

    Args:
        config (ModelConfig): Model configuration; variant presets are applied first.
        seed (int): Initialisation seed.

    Returns:
        SegModel: The model with freshly initialised parameters.

    Raises:
        ConfigError: For invalid width/resolution/topology combinations.
    """
    config = config.resolved()
    model = SegModel(config, seed)
    widths = [int(w) for w in config.encoder_widths]

    prev = config.input_channels
    for stage, width in enumerate(widths):
        model.add_conv(f"encoder.stage{stage}.conv", prev, width, 3)
        prev = width

    if config.topology == "fpn":
        pyramid = widths[1]
        for i, width in enumerate(widths):
            model.add_conv(f"fpn.lateral{i}", width, pyramid, 1)
        for level in range(N_STAGES - 1):
            if config.merge_kind == "quantum":
                gate = fusion.QuantumFpnGate.create(f"fpn.gate{level}", pyramid, seed, config.qubits,
                                                    config.layers, config.encoding_scale_kind)
                for param in gate.parameters():
                    model.register(param)
                model.fpn_gates[level] = gate
            model.add_conv(f"fpn.smooth{level}", pyramid, pyramid, 3)
        model.add_conv("head.conv", pyramid, 1, 3)
    else:
        model.add_conv("encoder.bottleneck.conv", widths[-1], widths[-1], 3)
        if config.merge_kind == "quantum":
            levels = range(N_STAGES) if config.skip_placement == "all_levels" else [N_STAGES - 1]
            for level in levels:
                gate = fusion.QuantumSkipGate.create(f"unet.skip_gate{level}", widths[level], seed, config.qubits,
                                                     config.layers, config.reupload, config.encoding_scale_kind)
                for param in gate.parameters():
                    model.register(param)
                model.skip_gates[level] = gate
        below = widths[-1]
        for level in reversed(range(N_STAGES)):
            model.add_conv(f"decoder.up{level}.conv", below + widths[level], widths[level], 3)
            below = widths[level]
        model.add_conv("head.conv", widths[0], 1, 3)

    logger.info(f"Built {config.topology}/{config.merge_kind} model: {model.count()} parameters, "
                f"{model.quantum_param_count} variational quantum parameters")
    return model


def forward(model: SegModel, batch) -> Node:
    """Logits of model on batch; see SegModel.forward."""
    return model.forward(batch)
