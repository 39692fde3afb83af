"""Staged CNN with IAU blocks, temporal pooling, and retrieval heads.

Frames pass the convolutional stages independently (batch and time
flattened together); at stages carrying an IAU block the map is
regrouped to (B, T, H, W, D) so relations see the whole sequence. After
the stages: spatial mean per frame, temporal mean per sequence, a linear
embedding for retrieval, and a classifier over training identities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from . import tensorio
from .blocks import BatchNorm, IauBlock, _uniform
from .errors import ConfigurationError, FormatError
from .tensor import Tensor

CONFIG_RECORD = "__config__"


@dataclass
class StageSpec:
    channels: int
    downsample: int = 1      # stride of the stage's first convolution
    blocks: int = 2          # conv groups in the stage
    iau: bool = False        # insert an IAU block before the last group

    def validate(self):
        if self.channels < 1 or self.blocks < 1:
            raise ConfigurationError(f"invalid stage {self}")
        if self.downsample not in (1, 2):
            raise ConfigurationError(f"downsample must be 1 or 2: {self}")


def default_stages(mode: str = "image") -> list:
    """16/32/64/128 channels; the last stage keeps full resolution.

    Image mode carries IAU blocks at stages 2 and 3, video mode at
    stage 2 only.
    """
    iau = [False, True, True, False] if mode == "image" else [False, True, False, False]
    return [StageSpec(16, 1, 2, iau[0]), StageSpec(32, 2, 2, iau[1]),
            StageSpec(64, 2, 2, iau[2]), StageSpec(128, 1, 2, iau[3])]


@dataclass
class ModelConfig:
    stages: list
    parts: int = 4
    frames: int = 4
    embedding_dim: int = 64
    num_ids: int = 8
    part_mode: str = "attention"
    arrangement: str = "ciau_stiau"
    block_kind: str = "iau"          # iau | stiau | ciau | none
    relations: str = "full"
    shared_projector: bool = True
    include_self: bool = True
    in_channels: int = 3

    def validate(self):
        if not self.stages:
            raise ConfigurationError("model needs at least one stage")
        for s in self.stages:
            s.validate()
        if self.frames < 1:
            raise ConfigurationError(f"frames must be at least 1, got {self.frames}")
        if self.block_kind not in ("iau", "stiau", "ciau", "none"):
            raise ConfigurationError(f"unknown block kind {self.block_kind!r}")
        if min(self.parts, self.embedding_dim, self.num_ids, self.in_channels) < 1:
            raise ConfigurationError(f"invalid model dims in {self}")

    def to_text(self) -> str:
        lines = [
            f"model.parts = {self.parts}",
            f"model.frames = {self.frames}",
            f"model.embedding_dim = {self.embedding_dim}",
            f"model.num_ids = {self.num_ids}",
            f"model.part_mode = {self.part_mode}",
            f"model.arrangement = {self.arrangement}",
            f"model.block_kind = {self.block_kind}",
            f"model.relations = {self.relations}",
            f"model.shared_projector = {str(self.shared_projector).lower()}",
            f"model.include_self = {str(self.include_self).lower()}",
            f"model.in_channels = {self.in_channels}",
        ]
        for i, s in enumerate(self.stages):
            lines.append(f"model.stages[{i}].channels = {s.channels}")
            lines.append(f"model.stages[{i}].downsample = {s.downsample}")
            lines.append(f"model.stages[{i}].blocks = {s.blocks}")
            lines.append(f"model.stages[{i}].iau = {str(s.iau).lower()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values: dict[str, str] = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()

        def pop(name, cast, default=None):
            if name in values:
                raw = values.pop(name)
                if cast is bool:
                    return raw.lower() == "true"
                return cast(raw)
            if default is None:
                raise FormatError(f"missing {name} in embedded model config")
            return default

        stages = []
        for i in range(16):
            key = f"model.stages[{i}].channels"
            if key not in values:
                break
            stages.append(StageSpec(
                channels=pop(key, int),
                downsample=pop(f"model.stages[{i}].downsample", int),
                blocks=pop(f"model.stages[{i}].blocks", int),
                iau=pop(f"model.stages[{i}].iau", bool)))
        cfg = cls(
            stages=stages,
            parts=pop("model.parts", int),
            frames=pop("model.frames", int),
            embedding_dim=pop("model.embedding_dim", int),
            num_ids=pop("model.num_ids", int),
            part_mode=pop("model.part_mode", str),
            arrangement=pop("model.arrangement", str),
            block_kind=pop("model.block_kind", str),
            relations=pop("model.relations", str),
            shared_projector=pop("model.shared_projector", bool),
            include_self=pop("model.include_self", bool),
            in_channels=pop("model.in_channels", int, 3))
        cfg.validate()
        return cfg


class ConvUnit:
    """conv3x3 (no bias) + batch norm + relu."""

    def __init__(self, cin: int, cout: int, stride: int,
                 rng: np.random.Generator, dtype):
        self.w = _uniform(rng, (3, 3, cin, cout), 9 * cin, dtype)
        self.bn = BatchNorm(cout, 1.0, dtype=dtype)
        self.stride = stride

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(self.bn.forward(
            T.conv3x3(x, self.w, stride=self.stride), training))

    def named_params(self):
        out = {"w": self.w}
        out.update({f"bn.{k}": v for k, v in self.bn.named_params().items()})
        return out

    def named_buffers(self):
        return {f"bn.{k}": v for k, v in self.bn.named_buffers().items()}


class Stage:
    def __init__(self, cin: int, spec: StageSpec, cfg: ModelConfig,
                 rng: np.random.Generator, dtype):
        self.units = []
        c = cin
        for i in range(spec.blocks):
            stride = spec.downsample if i == 0 else 1
            self.units.append(ConvUnit(c, spec.channels, stride, rng, dtype))
            c = spec.channels
        self.iau: Optional[IauBlock] = None
        if spec.iau and cfg.block_kind != "none":
            self.iau = IauBlock(
                spec.channels, cfg.parts, rng, kind=cfg.block_kind,
                arrangement=cfg.arrangement, part_mode=cfg.part_mode,
                relations=cfg.relations, shared_projector=cfg.shared_projector,
                include_self=cfg.include_self, dtype=dtype)

    def named_params(self):
        out = {}
        for i, u in enumerate(self.units):
            out.update({f"units.{i}.{k}": v for k, v in u.named_params().items()})
        if self.iau is not None:
            out.update({f"iau.{k}": v for k, v in self.iau.named_params().items()})
        return out

    def named_buffers(self):
        out = {}
        for i, u in enumerate(self.units):
            out.update({f"units.{i}.{k}": v for k, v in u.named_buffers().items()})
        if self.iau is not None:
            out.update({f"iau.{k}": v for k, v in self.iau.named_buffers().items()})
        return out


class IauNet:
    """The assembled network; built deterministically from (config, seed)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.stages = []
        c = config.in_channels
        for spec in config.stages:
            self.stages.append(Stage(c, spec, config, rng, dtype))
            c = spec.channels
        self.embed_w = _uniform(rng, (c, config.embedding_dim), c, dtype)
        self.embed_b = Tensor(np.zeros(config.embedding_dim, dtype=dtype),
                              requires_grad=True)
        self.cls_w = _uniform(rng, (config.embedding_dim, config.num_ids),
                              config.embedding_dim, dtype)
        self.cls_b = Tensor(np.zeros(config.num_ids, dtype=dtype),
                            requires_grad=True)

    # -- parameter plumbing -------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, stage in enumerate(self.stages):
            out.update({f"stages.{i}.{k}": v for k, v in stage.named_params().items()})
        out.update({"embed.w": self.embed_w, "embed.b": self.embed_b,
                    "classifier.w": self.cls_w, "classifier.b": self.cls_b})
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, stage in enumerate(self.stages):
            out.update({f"stages.{i}.{k}": v for k, v in stage.named_buffers().items()})
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def iau_blocks(self) -> dict[int, IauBlock]:
        return {i: s.iau for i, s in enumerate(self.stages) if s.iau is not None}

    # -- forward ------------------------------------------------------------

    def forward(self, batch, training: bool = False):
        """(B, T, H, W, C) in, (logits, embeddings, traces per stage) out."""
        x = batch if isinstance(batch, Tensor) else Tensor(
            np.asarray(batch, dtype=self.dtype))
        if x.ndim != 5 or x.shape[-1] != self.config.in_channels:
            raise ConfigurationError(
                f"expected (B, T, H, W, {self.config.in_channels}), got {x.shape}")
        B, Tn = x.shape[0], x.shape[1]
        x = T.reshape(x, (B * Tn,) + x.shape[2:])
        traces = {}
        for idx, stage in enumerate(self.stages):
            for unit in stage.units[:-1]:
                x = unit.forward(x, training)
            if stage.iau is not None:
                grouped = T.reshape(x, (B, Tn) + x.shape[1:])
                grouped, trace = stage.iau.forward(grouped, training)
                traces[idx] = trace
                x = T.reshape(grouped, (B * Tn,) + grouped.shape[2:])
            x = stage.units[-1].forward(x, training)
        pooled = T.mean_(x, axis=(1, 2))                      # (B*T, D)
        pooled = T.mean_(T.reshape(pooled, (B, Tn, pooled.shape[-1])), axis=1)
        emb = T.add(T.matmul(pooled, self.embed_w), self.embed_b)
        logits = T.add(T.matmul(emb, self.cls_w), self.cls_b)
        return logits, emb, traces

    def embed(self, batch) -> np.ndarray:
        """Evaluation-mode embeddings as a plain array."""
        with T.no_grad():
            _, emb, _ = self.forward(batch, training=False)
        return emb.data

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_params().items()}
        for k, v in self.named_buffers().items():
            out[f"buffer.{k}"] = v
        return out

    def load_state(self, records: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        buffers = self.named_buffers()
        expected = set(params) | {f"buffer.{k}" for k in buffers}
        got = set(records)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise FormatError(f"checkpoint mismatch: missing {missing}, extra {extra}")
        for k, p in params.items():
            if records[k].shape != p.data.shape:
                raise FormatError(f"{k}: shape {records[k].shape} vs {p.data.shape}")
            p.data = records[k].astype(self.dtype)
        for k, buf in buffers.items():
            buf[:] = records[f"buffer.{k}"]

    def save(self, path) -> None:
        records = {CONFIG_RECORD: tensorio.encode_text(self.config.to_text())}
        records.update(self.state_dict())
        tensorio.write_records(path, records)

    @classmethod
    def load(cls, path) -> "IauNet":
        records = tensorio.read_records(path)
        if CONFIG_RECORD not in records:
            raise FormatError(f"{path} has no embedded model config")
        config = ModelConfig.from_text(tensorio.decode_text(records.pop(CONFIG_RECORD)))
        model = cls(config, seed=0)
        model.load_state(records)
        return model
