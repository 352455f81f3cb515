"""Feature catalogs, candidate enumeration, and Pareto-front selection.

A catalog lists the unitary features a packet pipeline can compute, each with a
per-packet cycle cost, plus an accuracy label for every feature subset that has
a trained model behind it. From that pool we keep only the subsets worth
deploying: the (cost, accuracy) Pareto front, thinned so that consecutive
members differ by a meaningful accuracy gain.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CatalogError

log = logging.getLogger(__name__)

FEATURE_KINDS = (
    "counter",
    "throughput",
    "latency",
    "retransmission",
    "segment",
    "raw_header",
)

# Enumeration is exponential in the feature count; 2^20 subsets is the cap.
MAX_CATALOG_FEATURES = 20

CATALOG_SCHEMA = "flowshift/catalog-v1"
FRONT_SCHEMA = "flowshift/front-v1"
_KNOWN_SCHEMAS = (CATALOG_SCHEMA, FRONT_SCHEMA)


@dataclass(frozen=True)
class FeatureSpec:
    """One unitary feature: identity, per-packet cycle cost, and kind."""

    id: int
    name: str
    unit_cost: int
    kind: str

    def __post_init__(self):
        if self.id < 0:
            raise CatalogError(f"feature {self.name!r}: id must be >= 0, got {self.id}")
        if self.unit_cost < 0:
            raise CatalogError(
                f"feature {self.name!r}: unit_cost must be >= 0, got {self.unit_cost}"
            )
        if self.kind not in FEATURE_KINDS:
            raise CatalogError(
                f"feature {self.name!r}: unknown kind {self.kind!r}, "
                f"expected one of {', '.join(FEATURE_KINDS)}"
            )


@dataclass(frozen=True)
class CandidateModel:
    """A feature subset with its aggregate cost and labelled accuracy."""

    feature_mask: int
    cost: int
    accuracy: float


@dataclass(frozen=True)
class ParetoFront:
    """Non-dominated candidates ordered by ascending cost.

    Model indices are 1-based: index 1 is the cheapest member, index k_max the
    most accurate.
    """

    models: tuple[CandidateModel, ...]

    def __post_init__(self):
        if not self.models:
            raise CatalogError("a front must contain at least one model")
        prev = None
        for m in self.models:
            if prev is not None and (m.cost <= prev.cost or m.accuracy <= prev.accuracy):
                raise CatalogError(
                    "front is not strictly increasing in cost and accuracy: "
                    f"({prev.cost}, {prev.accuracy}) then ({m.cost}, {m.accuracy})"
                )
            prev = m

    @property
    def k_max(self) -> int:
        return len(self.models)

    def model(self, index: int) -> CandidateModel:
        """Return the model at 1-based index."""
        if not 1 <= index <= len(self.models):
            raise CatalogError(f"model index {index} out of range 1..{len(self.models)}")
        return self.models[index - 1]

    def accuracy_of(self, index: int) -> float:
        return self.model(index).accuracy


@dataclass
class Catalog:
    """Feature definitions plus the accuracy labels for known feature subsets."""

    features: list[FeatureSpec]
    accuracy_map: dict[int, float]
    base_packet_cost: int
    name: str = ""
    # Only the first N packets of each flow update features; None means no limit.
    first_n_packets: int | None = None

    def __post_init__(self):
        ids = [f.id for f in self.features]
        if sorted(ids) != list(range(len(self.features))):
            raise CatalogError(
                f"feature ids must be exactly 0..{len(self.features) - 1}, got {sorted(ids)}"
            )
        self.features = sorted(self.features, key=lambda f: f.id)
        if self.base_packet_cost < 0:
            raise CatalogError(f"base_packet_cost must be >= 0, got {self.base_packet_cost}")
        if self.first_n_packets is not None and self.first_n_packets < 1:
            raise CatalogError(f"first_n_packets must be >= 1, got {self.first_n_packets}")
        full = self.full_mask
        for mask, acc in self.accuracy_map.items():
            if mask <= 0 or mask & ~full:
                raise CatalogError(f"accuracy_map mask {mask:#x} is not a valid feature subset")
            if not 0.0 <= acc <= 1.0:
                raise CatalogError(f"accuracy {acc} for mask {mask:#x} outside [0, 1]")

    @property
    def full_mask(self) -> int:
        return (1 << len(self.features)) - 1

    def feature(self, fid: int) -> FeatureSpec:
        return self.features[fid]


def aggregate_cost(catalog: Catalog, feature_mask: int) -> int:
    """Sum the unit costs of all features set in the mask.

    The empty mask costs 0. Bits outside the catalog are an error.
    """
    if feature_mask < 0 or feature_mask & ~catalog.full_mask:
        raise CatalogError(
            f"mask {feature_mask:#x} has bits outside the catalog's "
            f"{len(catalog.features)} features"
        )
    total = 0
    mask = feature_mask
    while mask:
        fid = (mask & -mask).bit_length() - 1
        total += catalog.features[fid].unit_cost
        mask &= mask - 1
    return total


def enumerate_candidates(catalog: Catalog) -> list[CandidateModel]:
    """Build a CandidateModel for every non-empty feature subset with a label.

    Subsets missing from the accuracy map are skipped; the skipped count is
    logged as a warning so a thin map does not pass silently.
    """
    n = len(catalog.features)
    if not 1 <= n <= MAX_CATALOG_FEATURES:
        raise CatalogError(
            f"enumeration supports 1..{MAX_CATALOG_FEATURES} features, catalog has {n}"
        )
    candidates = []
    skipped = 0
    for mask in range(1, 1 << n):
        acc = catalog.accuracy_map.get(mask)
        if acc is None:
            skipped += 1
            continue
        candidates.append(CandidateModel(mask, aggregate_cost(catalog, mask), acc))
    if skipped:
        log.warning(
            "catalog %r: %d of %d subsets have no accuracy label and were skipped",
            catalog.name, skipped, (1 << n) - 1,
        )
    return candidates


def compute_pareto_front(candidates: list[CandidateModel]) -> ParetoFront:
    """Keep the non-dominated candidates, ordered by ascending cost.

    A candidate is dominated when another has cost <= and accuracy >= with at
    least one strict. Ties on identical (cost, accuracy) keep the smallest
    mask cardinality, then the smallest mask value.
    """
    if not candidates:
        raise CatalogError("cannot build a front from zero candidates")
    ordered = sorted(
        candidates,
        key=lambda c: (c.cost, -c.accuracy, c.feature_mask.bit_count(), c.feature_mask),
    )
    front = []
    best_acc = -1.0
    for c in ordered:
        if c.accuracy > best_acc:
            front.append(c)
            best_acc = c.accuracy
    return ParetoFront(tuple(front))


def filter_marginal_gains(front: ParetoFront, epsilon: float) -> ParetoFront:
    """Drop front members whose accuracy gain is below epsilon.

    Walks from the most accurate model downward, keeping a model only when it
    sits at least epsilon below the last one retained, so the higher-accuracy
    member of any close run survives. Both endpoints are always retained, even
    when they end up closer than epsilon to each other.
    """
    if epsilon < 0:
        raise CatalogError(f"epsilon must be >= 0, got {epsilon}")
    models = front.models
    if len(models) <= 2:
        return front
    top = models[-1]
    bottom = models[0]
    kept = [top]
    for m in reversed(models[1:-1]):
        if kept[-1].accuracy - m.accuracy >= epsilon:
            kept.append(m)
    # The cheapest model is kept unconditionally; interior members too close
    # above it would violate the gap rule, so peel them off.
    while len(kept) > 1 and kept[-1].accuracy - bottom.accuracy < epsilon:
        kept.pop()
    kept.append(bottom)
    return ParetoFront(tuple(reversed(kept)))


def build_front(catalog: Catalog, epsilon: float = 0.001) -> ParetoFront:
    """enumerate -> pareto -> marginal-gain filter, the full offline pipeline."""
    return filter_marginal_gains(
        compute_pareto_front(enumerate_candidates(catalog)), epsilon
    )


# ---------------------------------------------------------------------------
# File formats. Catalogs and fronts share one JSON layout; a front file is a
# catalog file whose model list is the ordered front.
# ---------------------------------------------------------------------------

def _parse_mask(raw, n_features: int, where: str) -> int:
    if isinstance(raw, str):
        try:
            mask = int(raw, 16)
        except ValueError:
            raise CatalogError(f"{where}: mask {raw!r} is not a hex string") from None
    elif isinstance(raw, list):
        if not all(isinstance(b, int) and 0 <= b < n_features for b in raw):
            raise CatalogError(
                f"{where}: mask {raw!r} must list feature ids in 0..{n_features - 1}"
            )
        if len(set(raw)) != len(raw):
            raise CatalogError(f"{where}: mask {raw!r} repeats a feature id")
        mask = 0
        for b in raw:
            mask |= 1 << b
    else:
        raise CatalogError(f"{where}: mask must be a hex string or a list of feature ids")
    if not 0 < mask < (1 << n_features):
        raise CatalogError(f"{where}: mask {raw!r} is empty or out of range")
    return mask


def mask_to_ids(mask: int) -> list[int]:
    ids = []
    fid = 0
    while mask:
        if mask & 1:
            ids.append(fid)
        mask >>= 1
        fid += 1
    return ids


def _load_document(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise CatalogError(f"catalog file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CatalogError(f"{path}: top level must be a JSON object")
    schema = doc.get("schema")
    if schema not in _KNOWN_SCHEMAS:
        raise CatalogError(
            f"{path}: unknown schema {schema!r}, expected one of {_KNOWN_SCHEMAS}"
        )
    for key in ("features", "models", "base_packet_cost"):
        if key not in doc:
            raise CatalogError(f"{path}: missing required key {key!r}")
    return doc


def _parse_features(doc: dict, path: Path) -> list[FeatureSpec]:
    feats = []
    for i, row in enumerate(doc["features"]):
        try:
            feats.append(
                FeatureSpec(
                    id=int(row["id"]),
                    name=str(row["name"]),
                    unit_cost=int(row["unit_cost"]),
                    kind=str(row["kind"]),
                )
            )
        except KeyError as exc:
            raise CatalogError(f"{path}: features[{i}] missing field {exc}") from None
    return feats


def load_catalog(path: str | Path) -> Catalog:
    """Load a catalog (or front) file into a Catalog."""
    path = Path(path)
    doc = _load_document(path)
    feats = _parse_features(doc, path)
    catalog = Catalog(
        features=feats,
        accuracy_map={},
        base_packet_cost=int(doc["base_packet_cost"]),
        name=str(doc.get("name", path.stem)),
        first_n_packets=doc.get("first_n_packets"),
    )
    amap = {}
    for i, row in enumerate(doc["models"]):
        where = f"{path}: models[{i}]"
        mask = _parse_mask(row.get("mask"), len(feats), where)
        try:
            acc = float(row["accuracy"])
        except (KeyError, TypeError, ValueError):
            raise CatalogError(f"{where}: missing or non-numeric accuracy") from None
        if not 0.0 <= acc <= 1.0:
            raise CatalogError(f"{where}: accuracy {acc} outside [0, 1]")
        if mask in amap:
            raise CatalogError(f"{where}: duplicate mask")
        amap[mask] = acc
        # A stored cost is a cross-check against the feature unit costs.
        if "cost" in row and int(row["cost"]) != aggregate_cost(catalog, mask):
            raise CatalogError(
                f"{where}: stored cost {row['cost']} does not match the sum of "
                f"unit costs {aggregate_cost(catalog, mask)}"
            )
    catalog.accuracy_map = amap
    return Catalog(
        features=feats,
        accuracy_map=amap,
        base_packet_cost=catalog.base_packet_cost,
        name=catalog.name,
        first_n_packets=catalog.first_n_packets,
    )


def load_front(path: str | Path) -> tuple[ParetoFront, Catalog]:
    """Load a front file: the ordered models plus the catalog context.

    The model list must be strictly increasing in both cost and accuracy;
    anything else is rejected so a stale or hand-edited file fails loudly.
    """
    path = Path(path)
    doc = _load_document(path)
    catalog = load_catalog(path)
    models = []
    for i, row in enumerate(doc["models"]):
        mask = _parse_mask(row["mask"], len(catalog.features), f"{path}: models[{i}]")
        models.append(CandidateModel(mask, aggregate_cost(catalog, mask), float(row["accuracy"])))
    try:
        front = ParetoFront(tuple(models))
    except CatalogError as exc:
        raise CatalogError(f"{path}: {exc}") from None
    return front, catalog


def save_front(front: ParetoFront, catalog: Catalog, path: str | Path) -> None:
    """Write a front file that load_front can read back."""
    doc = {
        "schema": FRONT_SCHEMA,
        "name": catalog.name,
        "base_packet_cost": catalog.base_packet_cost,
        "first_n_packets": catalog.first_n_packets,
        "features": [
            {"id": f.id, "name": f.name, "unit_cost": f.unit_cost, "kind": f.kind}
            for f in catalog.features
        ],
        "models": [
            {
                "mask": mask_to_ids(m.feature_mask),
                "cost": m.cost,
                "accuracy": m.accuracy,
            }
            for m in front.models
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    """Write a catalog file (used by the calibration command)."""
    doc = {
        "schema": CATALOG_SCHEMA,
        "name": catalog.name,
        "base_packet_cost": catalog.base_packet_cost,
        "first_n_packets": catalog.first_n_packets,
        "features": [
            {"id": f.id, "name": f.name, "unit_cost": f.unit_cost, "kind": f.kind}
            for f in catalog.features
        ],
        "models": [
            {
                "mask": mask_to_ids(mask),
                "cost": aggregate_cost(catalog, mask),
                "accuracy": acc,
            }
            for mask, acc in sorted(catalog.accuracy_map.items())
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def preset_path(name: str) -> Path:
    """Path of a packaged preset catalog ("video" or "service")."""
    p = Path(__file__).parent / "presets" / f"{name}.catalog"
    if not p.exists():
        raise CatalogError(f"no preset named {name!r}")
    return p
