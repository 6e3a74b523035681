"""Forward computation: per-slice CNN, per-modality LSTM, mask-and-concat
routing, per-group routed dense layers, modality fusion and the 2-unit head.

The CNN and LSTM are single shared instances used by all four modalities.
Routing dense layers are shared within the equal-length modality groups
{FLAIR, T2} and {T1w, T1wCE}; a single layer across all four is impossible
because its input width is rnn_units * t and t differs between the groups.

Padding handling: only the first ``true_length`` slices of each volume enter
the CNN; feature rows beyond that are exact zeros and the post-RNN mask
multiplies rows >= true_length by zero. Together with the causal (left-to-
right) recurrence this makes eval logits independent of padding content and
the gradient w.r.t. padding pixels and masked RNN rows exactly zero.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import BackboneConfig, ModelConfig
from .data import MODALITIES, PAD_VALUE, SLICE_SIZE, Modality, Scan
from .errors import CheckpointMismatch, ConfigError, InvalidLength, ShapeMismatch

CKPT_VERSION = "btdnet-ckpt-v1"


class TinyCnn(nn.Module):
    """Small 3-block conv backbone with global average pooling (D=32).

    An 8x8 entry pool brings 224x224 slices down to 28x28 before the convs,
    which keeps desk-scale runs cheap. When the input's channel stride is 0
    (replicated-grayscale view) the pool reads a single channel.
    """

    feature_dim = 32

    def __init__(self):
        super().__init__()
        self.pool = nn.AvgPool2d(8)
        self.blocks = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1),
            nn.GroupNorm(2, 8),
            nn.GELU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.GroupNorm(2, 16),
            nn.GELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(2, 32),
            nn.GELU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.stride(1) == 0:
            pooled = self.pool(x[:, :1]).expand(-1, 3, -1, -1)
        else:
            pooled = self.pool(x)
        return self.blocks(pooled)


class ResNet18Gap(nn.Module):
    """ResNet18 feature extractor: output layer dropped, global average
    pooling kept (D=512). Optionally initialized from an external weight file.
    """

    feature_dim = 512

    def __init__(self, weights: str = ""):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if weights:
            path = Path(weights)
            if not path.is_file():
                raise CheckpointMismatch(f"backbone weight file not found: {weights}")
            state = torch.load(path, map_location="cpu")
            state = {k: v for k, v in state.items() if not k.startswith("fc.")}
            missing, unexpected = net.load_state_dict(state, strict=False)
            bad = [k for k in missing if not k.startswith("fc.")] + list(unexpected)
            if bad:
                raise CheckpointMismatch(f"backbone weights do not match resnet18: {bad[:5]}")
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.contiguous() if x.stride(1) == 0 else x)


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "tiny_cnn":
        return TinyCnn()
    if cfg.kind == "resnet18_gap":
        return ResNet18Gap(cfg.weights)
    raise ConfigError(f"unknown backbone kind {cfg.kind!r}")


GROUP_FLAIR_T2 = "FLAIR_T2"
GROUP_T1 = "T1w_T1wCE"


def routing_group_name(modality: Modality, routing_shared: str) -> str:
    if routing_shared == "per_modality":
        return modality.value
    return GROUP_FLAIR_T2 if modality in (Modality.FLAIR, Modality.T2) else GROUP_T1


def routing_groups(config: ModelConfig) -> dict[str, tuple[tuple[Modality, ...], int]]:
    """Map group name -> (modalities, padded length). Grouped modalities must
    share a padded length or the dense input widths could not match."""
    groups: dict[str, list[Modality]] = {}
    for m in MODALITIES:
        groups.setdefault(routing_group_name(m, config.routing_shared), []).append(m)
    out = {}
    for name, mods in groups.items():
        ts = {config.t[m] for m in mods}
        if len(ts) != 1:
            raise ConfigError(
                f"routing group {name} mixes padded lengths {sorted(ts)}; "
                "use routing_shared='per_modality' or equalize t"
            )
        out[name] = (tuple(mods), ts.pop())
    return out


def mask_and_concat(outputs, true_length: int):
    """Flatten a (t, V) RNN output matrix row-major, zeroing rows >= l.

    Accepts a torch tensor or numpy array and returns the same kind. The
    zeroing is multiplicative, so gradients w.r.t. masked rows are exactly 0.
    """
    t = outputs.shape[0]
    if not 1 <= true_length <= t:
        raise InvalidLength(f"true length {true_length} outside [1, {t}]")
    if isinstance(outputs, torch.Tensor):
        mask = (
            (torch.arange(t, device=outputs.device) < true_length)
            .to(outputs.dtype)
            .unsqueeze(1)
        )
        return (outputs * mask).reshape(-1)
    mask = (np.arange(t) < true_length).astype(outputs.dtype)[:, None]
    return (outputs * mask).reshape(-1)


class RoutingDense(nn.Module):
    """Affine map on the masked concatenation, then batch norm and GELU."""

    def __init__(self, in_features: int, units: int):
        super().__init__()
        self.fc = nn.Linear(in_features, units)
        self.bn = nn.BatchNorm1d(units)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.fc(x)))


def _init_recurrent_orthogonal(rnn: nn.LSTM) -> None:
    """Orthogonal init per gate block of the recurrent weights."""
    hidden = rnn.hidden_size
    for name, param in rnn.named_parameters():
        if "weight_hh" in name:
            with torch.no_grad():
                for g in range(4):
                    nn.init.orthogonal_(param[g * hidden : (g + 1) * hidden])


@dataclass
class TraceTensors:
    """Intermediate tensors from one forward pass (gradients reachable)."""

    rnn_outputs: dict[Modality, torch.Tensor]
    masked: dict[Modality, torch.Tensor]
    routed: dict[Modality, torch.Tensor]
    fused: torch.Tensor
    logits: torch.Tensor


@dataclass
class ForwardTrace:
    """Numpy snapshot of a single scan's forward pass."""

    rnn_outputs: dict[Modality, np.ndarray]
    masked: dict[Modality, np.ndarray]
    routed: dict[Modality, np.ndarray]
    fused: np.ndarray
    logits: np.ndarray


class _SliceSequenceCore(nn.Module):
    """Shared machinery: CNN over real slices + LSTM + masked concatenation."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config.backbone)
        self.rnn = nn.LSTM(
            self.backbone.feature_dim, config.rnn_units, batch_first=True
        )
        _init_recurrent_orthogonal(self.rnn)

    def _check_slices(self, x: torch.Tensor) -> None:
        if x.shape[-3] not in (1, 3) or x.shape[-2:] != (SLICE_SIZE, SLICE_SIZE):
            raise ShapeMismatch(
                f"expected slices of shape (1|3, {SLICE_SIZE}, {SLICE_SIZE}), got {tuple(x.shape[-3:])}"
            )

    def cnn_features(self, slices):
        """Features for one (224, 224, 3) slice or an (N, 3, 224, 224) batch.

        Numpy in, numpy out; torch in, torch out.
        """
        was_numpy = isinstance(slices, np.ndarray)
        if was_numpy:
            x = torch.from_numpy(np.ascontiguousarray(slices))
            x = x.to(next(self.parameters()).dtype)
        else:
            x = slices
        single = x.ndim == 3
        if single:
            if x.shape != (SLICE_SIZE, SLICE_SIZE, 3):
                raise ShapeMismatch(f"expected ({SLICE_SIZE}, {SLICE_SIZE}, 3), got {tuple(x.shape)}")
            x = x.permute(2, 0, 1).unsqueeze(0)
        self._check_slices(x)
        out = self.backbone(x)
        if single:
            out = out.squeeze(0)
        return out.detach().numpy() if was_numpy else out

    def rnn_sequence(self, features):
        """(t, D) -> (t, V), or batched (B, t, D) -> (B, t, V); strictly causal."""
        was_numpy = isinstance(features, np.ndarray)
        if was_numpy:
            x = torch.from_numpy(np.ascontiguousarray(features))
            x = x.to(next(self.parameters()).dtype)
        else:
            x = features
        single = x.ndim == 2
        if single:
            x = x.unsqueeze(0)
        out, _ = self.rnn(x)
        if single:
            out = out.squeeze(0)
        return out.detach().numpy() if was_numpy else out

    def _slice_features(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(B, t, C, H, W) + lengths -> (B, t, D) with zero rows beyond length.

        Only real slices pass through the CNN; with a 1-channel input the
        grayscale is replicated to 3 channels as a zero-copy view.
        """
        if x.ndim != 5:
            raise ShapeMismatch(f"expected (B, t, C, H, W), got {tuple(x.shape)}")
        self._check_slices(x)
        b, t = x.shape[0], x.shape[1]
        ls = [int(v) for v in lengths]
        for l in ls:
            if not 1 <= l <= t:
                raise InvalidLength(f"true length {l} outside [1, {t}]")
        flat = torch.cat([x[i, : ls[i]] for i in range(b)])
        if flat.shape[1] == 1:
            flat = flat.expand(-1, 3, -1, -1)
        per_slice = self.backbone(flat)
        feats = x.new_zeros(b, t, per_slice.shape[1])
        offset = 0
        for i in range(b):
            feats[i, : ls[i]] = per_slice[offset : offset + ls[i]]
            offset += ls[i]
        return feats

    def _masked_flat(
        self, rnn_out: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        b, t, v = rnn_out.shape
        mask = (
            (torch.arange(t, device=rnn_out.device)[None, :] < lengths[:, None])
            .to(rnn_out.dtype)
            .unsqueeze(-1)
        )
        return (rnn_out * mask).reshape(b, t * v)


class BtdNet(_SliceSequenceCore):
    """The full multimodal classifier."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        v1 = config.routing_units
        self.groups = routing_groups(config)
        self.routing = nn.ModuleDict(
            {
                name: RoutingDense(config.rnn_units * t, v1)
                for name, (_, t) in self.groups.items()
            }
        )
        self.fusion_fc = nn.Linear(len(MODALITIES) * v1, config.fusion_units)
        self.fusion_act = nn.GELU()
        self.out_fc = nn.Linear(config.fusion_units, config.num_classes)

    def routing_dense(self, masked: torch.Tensor, modality: Modality) -> torch.Tensor:
        name = routing_group_name(modality, self.config.routing_shared)
        return self.routing[name](masked)

    def fuse_and_classify(self, routed: list[torch.Tensor]) -> torch.Tensor:
        """Concatenate the four routed vectors (FLAIR, T1w, T1wCE, T2 order)
        and map through the fusion dense + linear output; raw logits."""
        fused = self.fusion_act(self.fusion_fc(torch.cat(routed, dim=-1)))
        return self.out_fc(fused)

    def forward(
        self,
        pixels: dict[Modality, torch.Tensor],
        lengths: dict[Modality, torch.Tensor],
        keep_trace: bool = False,
    ):
        routed = []
        rnn_outputs: dict[Modality, torch.Tensor] = {}
        masked_by_mod: dict[Modality, torch.Tensor] = {}
        routed_by_mod: dict[Modality, torch.Tensor] = {}
        for m in MODALITIES:
            x = pixels[m]
            if x.shape[1] != self.config.t[m]:
                raise ShapeMismatch(
                    f"{m.value}: padded length {x.shape[1]} != configured t {self.config.t[m]}"
                )
            feats = self._slice_features(x, lengths[m])
            rnn_out = self.rnn_sequence(feats)
            masked = self._masked_flat(rnn_out, lengths[m])
            r = self.routing_dense(masked, m)
            routed.append(r)
            if keep_trace:
                if rnn_out.requires_grad:
                    rnn_out.retain_grad()
                rnn_outputs[m] = rnn_out
                masked_by_mod[m] = masked
                routed_by_mod[m] = r
        fused = self.fusion_act(self.fusion_fc(torch.cat(routed, dim=-1)))
        logits = self.out_fc(fused)
        if keep_trace:
            return logits, TraceTensors(rnn_outputs, masked_by_mod, routed_by_mod, fused, logits)
        return logits


class StreamModel(_SliceSequenceCore):
    """One modality's stream with a temporary 2-unit linear head.

    Used to train each stream independently; the head is discarded when the
    full model is assembled.
    """

    def __init__(self, config: ModelConfig, modality: Modality):
        super().__init__(config)
        self.modality = modality
        name = routing_group_name(modality, config.routing_shared)
        self.routing = nn.ModuleDict(
            {name: RoutingDense(config.rnn_units * config.t[modality], config.routing_units)}
        )
        self.head = nn.Linear(config.routing_units, config.num_classes)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.config.t[self.modality]:
            raise ShapeMismatch(
                f"{self.modality.value}: padded length {x.shape[1]} != configured t "
                f"{self.config.t[self.modality]}"
            )
        feats = self._slice_features(x, lengths)
        rnn_out = self.rnn_sequence(feats)
        masked = self._masked_flat(rnn_out, lengths)
        name = routing_group_name(self.modality, self.config.routing_shared)
        return self.head(self.routing[name](masked))


def scan_to_batch(
    scan: Scan, config: ModelConfig, dtype: torch.dtype = torch.float32
) -> tuple[dict[Modality, torch.Tensor], dict[Modality, torch.Tensor]]:
    """Tensors for a single padded scan: (1, t, 3, 224, 224) per modality."""
    pixels = {}
    lengths = {}
    for m in MODALITIES:
        vol = scan.volumes[m]
        if vol.padded_length != config.t[m]:
            raise ShapeMismatch(
                f"{m.value}: volume has {vol.padded_length} slices, pad to t={config.t[m]} first"
            )
        arr = np.ascontiguousarray(vol.pixels.transpose(0, 3, 1, 2))
        pixels[m] = torch.from_numpy(arr).to(dtype).unsqueeze(0)
        lengths[m] = torch.tensor([vol.true_length], dtype=torch.long)
    return pixels, lengths


def forward_scan(
    model: BtdNet,
    scan: Scan,
    mode: str = "eval",
    keep_trace: bool = False,
) -> tuple[np.ndarray, ForwardTrace | None]:
    """Run one padded scan through the full model; returns (logits, trace)."""
    pixels, lengths = scan_to_batch(scan, model.config, next(model.parameters()).dtype)
    was_training = model.training
    model.train(mode == "train")
    try:
        with torch.no_grad():
            out = model(pixels, lengths, keep_trace=keep_trace)
    finally:
        model.train(was_training)
    if not keep_trace:
        return out.squeeze(0).numpy(), None
    logits, tt = out
    trace = ForwardTrace(
        rnn_outputs={m: tt.rnn_outputs[m].squeeze(0).numpy() for m in MODALITIES},
        masked={m: tt.masked[m].squeeze(0).numpy() for m in MODALITIES},
        routed={m: tt.routed[m].squeeze(0).numpy() for m in MODALITIES},
        fused=tt.fused.squeeze(0).numpy(),
        logits=logits.squeeze(0).numpy(),
    )
    return trace.logits, trace


def random_scan_batch(
    config: ModelConfig,
    batch_size: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
    lengths: dict[Modality, list[int]] | None = None,
) -> tuple[dict[Modality, torch.Tensor], dict[Modality, torch.Tensor]]:
    """Random [-1, 1] pixel batch with correct padding; for tests/gradcheck."""
    pixels = {}
    lens = {}
    for m in MODALITIES:
        t = config.t[m]
        if lengths is not None:
            ls = list(lengths[m])
        else:
            ls = [int(rng.integers(1, t + 1)) for _ in range(batch_size)]
        x = np.full((batch_size, t, 3, SLICE_SIZE, SLICE_SIZE), PAD_VALUE, dtype=np.float32)
        for b, l in enumerate(ls):
            x[b, :l] = rng.uniform(-1.0, 1.0, size=(l, 1, SLICE_SIZE, SLICE_SIZE))
        pixels[m] = torch.from_numpy(x).to(dtype)
        lens[m] = torch.tensor(ls, dtype=torch.long)
    return pixels, lens


# --- checkpointing ---------------------------------------------------------


def save_checkpoint(path: str | Path, model: nn.Module, meta: dict | None = None) -> Path:
    """Single-archive checkpoint: all parameter/buffer tensors keyed by their
    hierarchical names, plus the model config embedded as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CKPT_VERSION,
        "model": model.config.to_dict(),
        "meta": meta or {},
    }
    arrays = {
        "param/" + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header)), **arrays)
    path.write_bytes(buf.getvalue())
    return path


@dataclass
class CheckpointPayload:
    model_config: ModelConfig
    meta: dict
    state: dict[str, np.ndarray]


def load_checkpoint(path: str | Path) -> CheckpointPayload:
    path = Path(path)
    if not path.is_file():
        raise CheckpointMismatch(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            if header.get("version") != CKPT_VERSION:
                raise CheckpointMismatch(
                    f"unsupported checkpoint version {header.get('version')!r}"
                )
            state = {
                k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")
            }
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointMismatch(f"unreadable checkpoint {path}: {exc}") from exc
    return CheckpointPayload(ModelConfig.from_dict(header["model"]), header["meta"], state)


def apply_state(model: nn.Module, state: dict[str, np.ndarray], prefix: str = "") -> None:
    """Load arrays into a model (optionally only keys under ``prefix``),
    validating names and shapes."""
    if prefix:
        state = {k: v for k, v in state.items() if k.startswith(prefix)}
        if not state:
            raise CheckpointMismatch(f"checkpoint has no keys under {prefix!r}")
    own = model.state_dict()
    for k, arr in state.items():
        if k not in own:
            raise CheckpointMismatch(f"checkpoint key {k!r} not in model")
        if tuple(own[k].shape) != arr.shape:
            raise CheckpointMismatch(
                f"shape mismatch for {k}: checkpoint {arr.shape}, model {tuple(own[k].shape)}"
            )
    with torch.no_grad():
        for k, arr in state.items():
            own[k].copy_(torch.from_numpy(arr.copy()))
