"""Label space: ordered anatomical regions, landmarks and pathologies.

Taxonomy files are YAML with three top-level sections::

    classes:
      - {id: 0, name: mouth, kind: region}
      - {id: 5, name: pylorus, kind: landmark}
      - {id: 8, name: ulcer, kind: pathology}
    region_order: [0, 1, 2, 3, 4]        # proximal -> distal
    landmark_rules:
      5: {valid_regions: [2, 3], tolerance_frames: 50}

Ids must be dense integers ``0..C-1``. Every region appears in
``region_order`` exactly once. Landmarks without a rule are never gated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

KINDS = ("region", "landmark", "pathology")


class TaxonomyError(ValueError):
    """Raised for a malformed or inconsistent taxonomy; names the offending field."""


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    kind: str


@dataclass(frozen=True)
class LandmarkRule:
    valid_regions: frozenset
    tolerance_frames: int = 50


@dataclass(frozen=True)
class LabelSpace:
    classes: tuple
    region_order: tuple
    landmark_rules: dict = field(default_factory=dict)

    def __post_init__(self):
        _validate(self)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def kind(self, class_id: int) -> str:
        self._check_id(class_id)
        return self.classes[class_id].kind

    def ids_of_kind(self, kind: str) -> list[int]:
        return [c.class_id for c in self.classes if c.kind == kind]

    @property
    def regions(self) -> list[int]:
        """Region ids in transit order."""
        return list(self.region_order)

    @property
    def landmarks(self) -> list[int]:
        return self.ids_of_kind("landmark")

    @property
    def pathologies(self) -> list[int]:
        return self.ids_of_kind("pathology")

    def index(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.class_id
        raise KeyError(name)

    def _check_id(self, class_id: int) -> None:
        if not 0 <= class_id < len(self.classes):
            raise IndexError(f"class_id {class_id} out of range 0..{len(self.classes) - 1}")


def region_rank(space: LabelSpace, class_id: int) -> Optional[int]:
    """Position of a region in transit order, or None for non-region classes."""
    space._check_id(class_id)
    if space.classes[class_id].kind != "region":
        return None
    return space.region_order.index(class_id)


def _validate(space: LabelSpace) -> None:
    ids = [c.class_id for c in space.classes]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise TaxonomyError(f"classes: duplicate id(s) {dup}")
    if sorted(ids) != list(range(len(ids))):
        raise TaxonomyError(f"classes: ids must be dense 0..{len(ids) - 1}, got {sorted(ids)}")
    if [c.class_id for c in space.classes] != list(range(len(ids))):
        raise TaxonomyError("classes: must be stored in id order")
    for c in space.classes:
        if c.kind not in KINDS:
            raise TaxonomyError(f"classes[{c.class_id}].kind: unknown kind {c.kind!r}")
    names = [c.name for c in space.classes]
    if len(set(names)) != len(names):
        raise TaxonomyError("classes: duplicate class names")

    region_ids = {c.class_id for c in space.classes if c.kind == "region"}
    if not region_ids:
        raise TaxonomyError("region_order: at least one region class is required")
    order = list(space.region_order)
    if len(set(order)) != len(order):
        raise TaxonomyError("region_order: duplicate region id")
    for r in order:
        if r not in region_ids:
            raise TaxonomyError(f"region_order: id {r} is not a region class")
    missing = region_ids - set(order)
    if missing:
        raise TaxonomyError(f"region_order: missing region id(s) {sorted(missing)}")

    for lm, rule in space.landmark_rules.items():
        if not 0 <= lm < len(space.classes) or space.classes[lm].kind != "landmark":
            raise TaxonomyError(f"landmark_rules[{lm}]: key is not a landmark class")
        name = space.classes[lm].name
        if not rule.valid_regions:
            raise TaxonomyError(f"landmark_rules[{lm}] ({name}): valid_regions is empty")
        for r in rule.valid_regions:
            if r not in region_ids:
                raise TaxonomyError(
                    f"landmark_rules[{lm}] ({name}).valid_regions: unknown region id {r}"
                )
        if rule.tolerance_frames < 0:
            raise TaxonomyError(f"landmark_rules[{lm}] ({name}).tolerance_frames: must be >= 0")


def taxonomy_from_dict(raw: dict) -> LabelSpace:
    if not isinstance(raw, dict):
        raise TaxonomyError("taxonomy: top level must be a mapping")
    for key in ("classes", "region_order"):
        if key not in raw:
            raise TaxonomyError(f"{key}: section missing")
    classes = []
    for i, entry in enumerate(raw["classes"] or []):
        try:
            classes.append(ClassInfo(int(entry["id"]), str(entry["name"]), str(entry["kind"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise TaxonomyError(f"classes[{i}]: expected {{id, name, kind}} ({exc})") from None
    classes.sort(key=lambda c: c.class_id)
    try:
        order = tuple(int(r) for r in raw["region_order"] or [])
    except (TypeError, ValueError):
        raise TaxonomyError("region_order: expected a list of integer ids") from None
    rules = {}
    for key, entry in (raw.get("landmark_rules") or {}).items():
        try:
            lm = int(key)
            valid = frozenset(int(r) for r in entry["valid_regions"])
            tol = int(entry.get("tolerance_frames", 50))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise TaxonomyError(f"landmark_rules[{key}]: malformed rule ({exc})") from None
        rules[lm] = LandmarkRule(valid, tol)
    return LabelSpace(tuple(classes), order, rules)


def taxonomy_to_dict(space: LabelSpace) -> dict:
    return {
        "classes": [{"id": c.class_id, "name": c.name, "kind": c.kind} for c in space.classes],
        "region_order": list(space.region_order),
        "landmark_rules": {
            lm: {
                "valid_regions": sorted(rule.valid_regions),
                "tolerance_frames": rule.tolerance_frames,
            }
            for lm, rule in sorted(space.landmark_rules.items())
        },
    }


def load_taxonomy(path) -> LabelSpace:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise TaxonomyError(f"{path}: parse failure: {exc}") from None
    return taxonomy_from_dict(raw)


def dump_taxonomy(space: LabelSpace, path) -> None:
    Path(path).write_text(yaml.safe_dump(taxonomy_to_dict(space), sort_keys=False))


def default_taxonomy_path() -> Path:
    return Path(str(resources.files("capsule_events") / "data" / "default_taxonomy.yaml"))


def default_taxonomy() -> LabelSpace:
    return load_taxonomy(default_taxonomy_path())
