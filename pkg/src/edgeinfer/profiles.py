"""DNN layer profiles and partition-point accounting.

A model profile is a per-layer table of compute (FLOPs), parameter bytes and
activation output bytes, plus a leakage table with one entry per partition
point. Partition point ``l`` means layers ``1..l`` run on the user device and
layers ``l+1..L`` run on the edge server; ``l = 0`` is full edge execution
(the raw input is uploaded) and ``l = L`` is full device execution (nothing
is uploaded, the result stays local).

All FLOPs and byte quantities are Python ints, so cumulative sums are exact.
Leakage is a reconstructability proxy in [0, 1]: 1 at the raw input, 0 after
the final layer, non-increasing with depth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator

ELEM_BYTES = 4  # single-precision activation elements

# Leakage anchors in normalized depth x = l / L, matching the measured decay
# of reconstruction quality for the vgg16 class (0.99 at l=2, 0.59 at l=8,
# 0.35 at l=14 out of 16). All families share the same normalized curve.
_LEAKAGE_ANCHORS_X = (0.0, 0.125, 0.5, 0.875, 1.0)
_LEAKAGE_ANCHORS_Y = (1.0, 0.99, 0.59, 0.35, 0.0)


class CatalogError(ValueError):
    """Raised when a profile file is malformed or violates an invariant."""


def conv_output_bytes(elem_bytes: int, h: int, w: int, c: int) -> int:
    """Feature-map volume of a conv layer with output dims (h, w, c)."""
    if min(elem_bytes, h, w, c) < 0:
        raise ValueError("conv output dims must be non-negative")
    return elem_bytes * h * w * c


def dense_output_bytes(elem_bytes: int, v: int) -> int:
    """Output volume of a fully connected layer with v output units."""
    if elem_bytes < 0 or v < 0:
        raise ValueError("dense output dims must be non-negative")
    return elem_bytes * v


@dataclass(frozen=True)
class LayerProfile:
    """One computational layer (pooling/activation pre-merged into it)."""

    kind: str  # "conv" | "dense"
    flops: int
    param_bytes: int
    out_dims: tuple[int, ...]  # (h, w, c) for conv, (v,) for dense

    @cached_property
    def out_bytes(self) -> int:
        if self.kind == "conv":
            return conv_output_bytes(ELEM_BYTES, *self.out_dims)
        if self.kind == "dense":
            return dense_output_bytes(ELEM_BYTES, *self.out_dims)
        raise CatalogError(f"unknown layer kind {self.kind!r}")

    def validate(self, where: str) -> None:
        if self.kind not in ("conv", "dense"):
            raise CatalogError(f"{where}: unknown layer kind {self.kind!r}")
        if self.kind == "conv" and len(self.out_dims) != 3:
            raise CatalogError(f"{where}: conv layers need (h, w, c) dims")
        if self.kind == "dense" and len(self.out_dims) != 1:
            raise CatalogError(f"{where}: dense layers need (v,) dims")
        if self.flops < 0 or self.param_bytes < 0:
            raise CatalogError(f"{where}: negative flops or param_bytes")
        if any(d < 0 for d in self.out_dims):
            raise CatalogError(f"{where}: negative output dimension")


@dataclass(frozen=True)
class ModelProfile:
    """Per-model layer table plus partition-point leakage scores."""

    model_id: int
    layers: tuple[LayerProfile, ...]
    raw_input_bytes: int
    total_bytes: int
    leakage_table: tuple[float, ...]
    family: str = ""

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @cached_property
    def _cum_params(self) -> tuple[int, ...]:
        acc, out = 0, [0]
        for layer in self.layers:
            acc += layer.param_bytes
            out.append(acc)
        return tuple(out)

    @cached_property
    def _cum_flops(self) -> tuple[int, ...]:
        acc, out = 0, [0]
        for layer in self.layers:
            acc += layer.flops
            out.append(acc)
        return tuple(out)

    @property
    def total_flops(self) -> int:
        return self._cum_flops[-1]

    def validate(self) -> None:
        where = f"model {self.model_id}"
        if not self.layers:
            raise CatalogError(f"{where}: empty layer list")
        for idx, layer in enumerate(self.layers):
            layer.validate(f"{where} layer {idx + 1}")
        if self.raw_input_bytes < 0:
            raise CatalogError(f"{where}: negative raw_input_bytes")
        param_sum = sum(layer.param_bytes for layer in self.layers)
        if self.total_bytes < param_sum:
            raise CatalogError(
                f"{where}: total_bytes {self.total_bytes} below parameter sum {param_sum}"
            )
        table = self.leakage_table
        if len(table) != self.layer_count + 1:
            raise CatalogError(
                f"{where}: leakage_table needs {self.layer_count + 1} entries, got {len(table)}"
            )
        if table[0] != 1.0:
            raise CatalogError(f"{where}: leakage_table[0] must be 1.0, got {table[0]}")
        if table[-1] != 0.0:
            raise CatalogError(f"{where}: leakage_table[-1] must be 0.0, got {table[-1]}")
        for idx, (a, b) in enumerate(zip(table, table[1:])):
            if not (0.0 <= a <= 1.0) or b > a:
                raise CatalogError(f"{where}: leakage_table not monotone in [0,1] at index {idx}")


@dataclass(frozen=True)
class PartitionSummary:
    """Quantities a partition point induces for one request."""

    download_bytes: int  # parameter bytes fetched for the device-side layers
    local_flops: int
    edge_flops: int
    upload_bytes: int  # per-sample feature (or raw input) bytes sent uplink
    leakage: float


def partition_summary(profile: ModelProfile, l: int) -> PartitionSummary:
    """Accounting for partitioning ``profile`` after layer ``l``.

    Boundary conventions: at l = 0 the raw input is uploaded; at l = L
    nothing is uploaded (the result stays on the device).
    """
    count = profile.layer_count
    if not 0 <= l <= count:
        raise ValueError(f"partition point {l} outside 0..{count}")
    if l == 0:
        upload = profile.raw_input_bytes
    elif l == count:
        upload = 0
    else:
        upload = profile.layers[l - 1].out_bytes
    return PartitionSummary(
        download_bytes=profile._cum_params[l],
        local_flops=profile._cum_flops[l],
        edge_flops=profile.total_flops - profile._cum_flops[l],
        upload_bytes=upload,
        leakage=profile.leakage_table[l],
    )


def leakage_at(profile: ModelProfile, l: int) -> float:
    """Leakage score at partition point ``l``."""
    if not 0 <= l <= profile.layer_count:
        raise ValueError(f"partition point {l} outside 0..{profile.layer_count}")
    return profile.leakage_table[l]


# ---------------------------------------------------------------------------
# Catalog file I/O (JSON, schema documented in README)
# ---------------------------------------------------------------------------

def _profile_to_dict(profile: ModelProfile) -> dict:
    return {
        "model_id": profile.model_id,
        "family": profile.family,
        "raw_input_bytes": profile.raw_input_bytes,
        "total_bytes": profile.total_bytes,
        "layers": [
            {
                "kind": layer.kind,
                "flops": layer.flops,
                "param_bytes": layer.param_bytes,
                "out_dims": list(layer.out_dims),
            }
            for layer in profile.layers
        ],
        "leakage_table": list(profile.leakage_table),
    }


def _profile_from_dict(entry: dict, where: str) -> ModelProfile:
    try:
        layers = tuple(
            LayerProfile(
                kind=raw["kind"],
                flops=int(raw["flops"]),
                param_bytes=int(raw["param_bytes"]),
                out_dims=tuple(int(d) for d in raw["out_dims"]),
            )
            for raw in entry["layers"]
        )
        profile = ModelProfile(
            model_id=int(entry["model_id"]),
            layers=layers,
            raw_input_bytes=int(entry["raw_input_bytes"]),
            total_bytes=int(entry["total_bytes"]),
            leakage_table=tuple(float(x) for x in entry["leakage_table"]),
            family=str(entry.get("family", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CatalogError(f"{where}: malformed profile entry ({exc})") from exc
    profile.validate()
    return profile


def load_catalog(path: str) -> list[ModelProfile]:
    """Load and validate a profile catalog from a JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogError(f"cannot parse catalog {path}: {exc}") from exc
    if not isinstance(data, list):
        raise CatalogError(f"{path}: top level must be a list of profiles")
    return [_profile_from_dict(entry, f"{path} entry {idx}") for idx, entry in enumerate(data)]


def save_catalog(path: str, profiles: list[ModelProfile]) -> None:
    """Write a catalog as canonical JSON (stable key order, one object per model)."""
    with open(path, "w", encoding="utf-8") as handle:
        json.dump([_profile_to_dict(p) for p in profiles], handle, indent=2, sort_keys=True)
        handle.write("\n")


def catalog_to_json(profiles: list[ModelProfile]) -> str:
    return json.dumps([_profile_to_dict(p) for p in profiles], indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Synthetic catalog generator
# ---------------------------------------------------------------------------

# name -> (layers, dense widths, input (h, w, c), stem channels, channel cap,
#          target GFLOPs, target parameter MB)
FAMILY_SPECS: dict[str, tuple] = {
    "lenet7": (7, (256, 10), (64, 64, 1), 8, 64, 0.05, 2.0),
    "lenet9": (9, (256, 10), (96, 96, 1), 8, 96, 0.12, 5.0),
    "lenet12": (12, (512, 256, 10), (128, 128, 1), 16, 128, 0.3, 12.0),
    "resnet18": (18, (1000,), (224, 224, 3), 64, 512, 1.8, 46.7),
    "resnet34": (34, (1000,), (224, 224, 3), 64, 512, 3.6, 87.2),
    "resnet50": (50, (1000,), (224, 224, 3), 64, 512, 4.1, 102.0),
    "vgg13": (13, (4096, 4096, 1000), (224, 224, 3), 64, 512, 11.3, 508.0),
    "vgg16": (16, (4096, 4096, 1000), (224, 224, 3), 64, 512, 15.5, 528.0),
    "vgg19": (19, (4096, 4096, 1000), (224, 224, 3), 64, 512, 19.6, 549.0),
}

BASE_FAMILIES = tuple(FAMILY_SPECS)


def leakage_table_for(layer_count: int) -> tuple[float, ...]:
    """Monotone concave leakage curve over partition points 0..L.

    Interpolates the normalized anchor decay with a shape-preserving cubic,
    which keeps the curve monotone and hits the anchors exactly (for L = 16
    the anchors fall on integer points 2, 8 and 14).
    """
    interp = PchipInterpolator(_LEAKAGE_ANCHORS_X, _LEAKAGE_ANCHORS_Y)
    xs = np.arange(layer_count + 1) / layer_count
    values = np.clip(interp(xs), 0.0, 1.0)
    values[0], values[-1] = 1.0, 0.0
    return tuple(float(v) for v in values)


def _conv_stack_dims(
    n_conv: int, input_hwc: tuple[int, int, int], stem: int, cap: int
) -> list[tuple[int, int, int]]:
    """Output dims for a 5-stage conv stack; each stage's last layer pools."""
    h, w, _ = input_hwc
    stage_len = max(1, -(-n_conv // 5))
    dims = []
    channels = stem
    for idx in range(n_conv):
        stage, pos = divmod(idx, stage_len)
        channels = min(cap, stem * (2 ** min(stage, 4)))
        scale = 2 ** (stage + 1) if pos == stage_len - 1 or idx == n_conv - 1 else 2 ** stage
        dims.append((max(1, h // scale), max(1, w // scale), channels))
    return dims


def _build_family_profile(
    model_id: int, family: str, channel_scale: float, workload_scale: float
) -> ModelProfile:
    layer_count, dense_widths, input_hwc, stem, cap, gflops, param_mb = FAMILY_SPECS[family]
    n_conv = layer_count - len(dense_widths)
    in_c = input_hwc[2]

    conv_dims = _conv_stack_dims(n_conv, input_hwc, stem, cap)
    conv_dims = [(h, w, max(1, round(c * channel_scale))) for h, w, c in conv_dims]

    layers: list[tuple[str, int, int, tuple[int, ...]]] = []
    prev_c = in_c
    for h, w, c in conv_dims:
        flops = 2 * 9 * prev_c * c * h * w
        params = (9 * prev_c * c + c) * ELEM_BYTES
        layers.append(("conv", flops, params, (h, w, c)))
        prev_c = c

    fan_in = conv_dims[-1][0] * conv_dims[-1][1] * conv_dims[-1][2] if conv_dims else (
        input_hwc[0] * input_hwc[1] * in_c
    )
    for pos, width in enumerate(dense_widths):
        # class-count head stays fixed; hidden dense widths scale with the service
        v = width if pos == len(dense_widths) - 1 else max(1, round(width * channel_scale))
        flops = 2 * fan_in * v
        params = (fan_in * v + v) * ELEM_BYTES
        layers.append(("dense", flops, params, (v,)))
        fan_in = v

    raw_flops = sum(f for _, f, _, _ in layers)
    raw_params = sum(p for _, _, p, _ in layers)
    flops_factor = workload_scale * gflops * 1e9 / raw_flops
    param_factor = workload_scale * param_mb * 1e6 / raw_params

    profile_layers = tuple(
        LayerProfile(
            kind=kind,
            flops=max(1, int(flops * flops_factor)),
            param_bytes=max(1, int(params * param_factor)),
            out_dims=dims,
        )
        for kind, flops, params, dims in layers
    )
    param_sum = sum(layer.param_bytes for layer in profile_layers)
    return ModelProfile(
        model_id=model_id,
        layers=profile_layers,
        raw_input_bytes=input_hwc[0] * input_hwc[1] * input_hwc[2] * ELEM_BYTES,
        total_bytes=(param_sum * 6) // 5,  # parameters plus runtime buffer headroom
        leakage_table=leakage_table_for(layer_count),
        family=family,
    )


def synth_catalog(
    base_models: tuple[str, ...] = BASE_FAMILIES,
    services_per_model: int = 5,
    seed: int = 0,
) -> list[ModelProfile]:
    """Generate ``len(base_models) * services_per_model`` plausible profiles.

    Service 0 of each family is the unperturbed base profile; further services
    jitter channel widths and workload by up to +/-15% (deterministic under
    ``seed``). Model ids are assigned in family order, which also serves as
    the popularity order for request sampling.
    """
    if services_per_model < 1:
        raise ValueError("services_per_model must be >= 1")
    unknown = [f for f in base_models if f not in FAMILY_SPECS]
    if unknown:
        raise ValueError(f"unknown model families: {unknown}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCA7A)))
    catalog = []
    for family in base_models:
        for service in range(services_per_model):
            if service == 0:
                ch_scale, wl_scale = 1.0, 1.0
            else:
                ch_scale, wl_scale = rng.uniform(0.85, 1.15, size=2)
            profile = _build_family_profile(len(catalog), family, ch_scale, wl_scale)
            profile.validate()
            catalog.append(profile)
    return catalog
