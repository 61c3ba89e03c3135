"""Dataset manifests, exclusion rules, referable-DR labels and split plans."""
from __future__ import annotations

import csv
import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DuplicateSampleError,
    EmptyInputError,
    ManifestSchemaError,
    ManifestValidationError,
    MissingLabelError,
    PlanError,
    UnknownDomainError,
)
from .seeding import derive

MANIFEST_COLUMNS = (
    "sample_id",
    "dataset_id",
    "image_path",
    "patient_id",
    "icdr",
    "dme",
    "gradable",
    "age_years",
    "diabetic",
)

# Exclusion rules in evaluation order; a record is counted under the first rule it violates.
EXCLUSION_RULES = ("nongradable", "missing_icdr", "age<18", "nondiabetic")

ADULT_AGE = 18


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    dataset_id: str
    image_path: str
    patient_id: Optional[str] = None
    icdr: Optional[int] = None
    dme: Optional[bool] = None
    gradable: bool = True
    age_years: Optional[float] = None
    diabetic: Optional[bool] = None

    def __post_init__(self):
        if self.icdr is not None and (not isinstance(self.icdr, (int, np.integer)) or not 0 <= self.icdr <= 4):
            raise ManifestValidationError(
                f"icdr grade {self.icdr!r} outside 0-4 for sample {self.sample_id}", [self.sample_id]
            )
        if self.age_years is not None and self.age_years < 0:
            raise ManifestValidationError(f"negative age for sample {self.sample_id}", [self.sample_id])


@dataclass
class DatasetManifest:
    dataset_id: str
    records: list[SampleRecord]
    source_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        foreign = [r.sample_id for r in self.records if r.dataset_id != self.dataset_id]
        if foreign:
            raise ManifestValidationError(
                f"records not belonging to dataset {self.dataset_id!r}: {', '.join(foreign[:10])}", foreign
            )
        seen = set()
        dups = []
        for r in self.records:
            if r.sample_id in seen:
                dups.append(r.sample_id)
            seen.add(r.sample_id)
        if dups:
            raise DuplicateSampleError(f"duplicate sample_id(s): {', '.join(sorted(set(dups)))}", dups)

    def __len__(self):
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.sample_id for r in self.records]


class Mode(str, enum.Enum):
    SINGLE_SOURCE = "SS"
    MULTI_SOURCE = "MST"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "ss": cls.SINGLE_SOURCE,
            "single-source": cls.SINGLE_SOURCE,
            "mst": cls.MULTI_SOURCE,
            "multi-source": cls.MULTI_SOURCE,
        }
        if key not in aliases:
            raise PlanError(f"unknown training mode {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class SplitSpec:
    train_ids: frozenset
    val_ids: frozenset
    test_ids: frozenset
    seed: int

    def __post_init__(self):
        if self.train_ids & self.val_ids or self.train_ids & self.test_ids or self.val_ids & self.test_ids:
            raise PlanError("split partitions overlap")


@dataclass
class TrainingPlan:
    mode: Mode
    source_train: list[SampleRecord]
    joint_val: list[SampleRecord]
    target_domain: Optional[str]
    target_eval: list[SampleRecord]

    def __post_init__(self):
        train = {r.sample_id for r in self.source_train}
        val = {r.sample_id for r in self.joint_val}
        if train & val:
            raise PlanError("source_train and joint_val overlap")
        if self.mode is Mode.MULTI_SOURCE:
            leaked = [
                r.sample_id for r in self.source_train + self.joint_val if r.dataset_id == self.target_domain
            ]
            if leaked:
                raise PlanError(f"target-domain samples in training data: {leaked[:5]}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "target_domain": self.target_domain,
            "source_train": [r.sample_id for r in self.source_train],
            "joint_val": [r.sample_id for r in self.joint_val],
            "target_eval": [r.sample_id for r in self.target_eval],
        }


def _parse_int(text):
    text = text.strip()
    if not text:
        return None
    try:
        value = float(text)
    except ValueError:
        return None
    if not math.isfinite(value) or value != int(value):
        return None
    return int(value)


def _parse_float(text):
    text = text.strip()
    if not text:
        return None
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


def _parse_bool(text):
    key = text.strip().lower()
    if key in _TRUE:
        return True
    if key in _FALSE:
        return False
    return None


def load_manifest(path) -> DatasetManifest:
    """Read a manifest CSV, keeping row order.

    Empty or unparseable optional cells become ``None``. Grades outside
    0-4, an unparseable ``gradable`` flag and duplicate ids are errors.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestSchemaError(f"{path}: missing required column(s): {', '.join(missing)}")
        rows = list(reader)

    records = []
    bad_grades = []
    problems = []
    for lineno, row in enumerate(rows, start=2):
        sid = (row["sample_id"] or "").strip()
        if not sid:
            problems.append(f"row {lineno}: empty sample_id")
            continue
        dataset_id = (row["dataset_id"] or "").strip()
        if not dataset_id:
            problems.append(f"row {lineno}: empty dataset_id")
            continue
        icdr = _parse_int(row["icdr"] or "")
        if icdr is not None and not 0 <= icdr <= 4:
            bad_grades.append((lineno, sid, row["icdr"]))
            continue
        gradable = _parse_bool(row["gradable"] or "")
        if gradable is None:
            problems.append(f"row {lineno}: unparseable gradable flag {row['gradable']!r} (sample {sid})")
            continue
        age = _parse_float(row["age_years"] or "")
        if age is not None and age < 0:
            age = None
        records.append(
            SampleRecord(
                sample_id=sid,
                dataset_id=dataset_id,
                image_path=(row["image_path"] or "").strip(),
                patient_id=(row["patient_id"] or "").strip() or None,
                icdr=icdr,
                dme=_parse_bool(row["dme"] or ""),
                gradable=gradable,
                age_years=age,
                diabetic=_parse_bool(row["diabetic"] or ""),
            )
        )
    if bad_grades:
        detail = "; ".join(f"row {ln}: sample {sid} icdr={raw!r}" for ln, sid, raw in bad_grades)
        raise ManifestValidationError(f"{path}: icdr outside 0-4: {detail}", [sid for _, sid, _ in bad_grades])
    if problems:
        raise ManifestSchemaError(f"{path}: " + "; ".join(problems))

    dataset_ids = OrderedDict.fromkeys(r.dataset_id for r in records)
    if len(dataset_ids) > 1:
        raise ManifestValidationError(f"{path}: mixed dataset_id values {list(dataset_ids)}")
    dataset_id = next(iter(dataset_ids), path.stem)
    return DatasetManifest(dataset_id, records, {"path": str(path)})


def _fmt_bool(v):
    return "" if v is None else ("1" if v else "0")


def _fmt_num(v):
    if v is None:
        return ""
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow(
                [
                    r.sample_id,
                    r.dataset_id,
                    r.image_path,
                    r.patient_id or "",
                    "" if r.icdr is None else str(r.icdr),
                    _fmt_bool(r.dme),
                    _fmt_bool(r.gradable),
                    _fmt_num(r.age_years),
                    _fmt_bool(r.diabetic),
                ]
            )
    return path


def exclusion_reason(record: SampleRecord) -> Optional[str]:
    """Name of the first exclusion rule ``record`` violates, else ``None``.

    Unknown age or diabetes status never excludes a record.
    """
    if not record.gradable:
        return "nongradable"
    if record.icdr is None:
        return "missing_icdr"
    if record.age_years is not None and record.age_years < ADULT_AGE:
        return "age<18"
    if record.diabetic is False:
        return "nondiabetic"
    return None


def apply_exclusions(manifest: DatasetManifest) -> DatasetManifest:
    kept = [r for r in manifest.records if exclusion_reason(r) is None]
    return DatasetManifest(manifest.dataset_id, kept, dict(manifest.source_meta))


def exclusion_summary(manifest: DatasetManifest) -> dict[str, int]:
    counts = {rule: 0 for rule in EXCLUSION_RULES}
    for r in manifest.records:
        reason = exclusion_reason(r)
        if reason is not None:
            counts[reason] += 1
    return counts


def derive_rdr(record: SampleRecord) -> bool:
    """Referable DR: ICDR grade 2 or worse, or diabetic macular edema."""
    if record.icdr is None:
        raise MissingLabelError(f"sample {record.sample_id} has no ICDR grade")
    return record.icdr >= 2 or record.dme is True


def _patient_groups(records: Sequence[SampleRecord]) -> "OrderedDict[str, list[str]]":
    groups: OrderedDict[str, list[str]] = OrderedDict()
    for r in records:
        # a missing patient id makes the record its own patient
        key = f"p:{r.patient_id}" if r.patient_id is not None else f"s:{r.sample_id}"
        groups.setdefault(key, []).append(r.sample_id)
    return groups


def _greedy_take(order, groups, quota):
    chosen = []
    count = 0
    for key in order:
        size = len(groups[key])
        if abs(count + size - quota) < abs(count - quota):
            chosen.append(key)
            count += size
    return chosen


def split_patient_stratified(
    manifest: DatasetManifest, val_fraction: float, seed: int, test_fraction: float = 0.0
) -> SplitSpec:
    """Split at patient granularity.

    Patient keys are sorted, shuffled with ``seed``, and then taken greedily
    whenever adding a patient moves the record count closer to the quota.
    A test partition is filled first when ``test_fraction > 0``. Neither
    partition is left empty while enough patients remain (three for a
    test partition, two for validation).
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if not 0 <= test_fraction < 1 or val_fraction + test_fraction >= 1:
        raise ValueError(f"invalid test_fraction {test_fraction}")
    if not manifest.records:
        raise EmptyInputError(f"cannot split empty manifest {manifest.dataset_id!r}")

    groups = _patient_groups(manifest.records)
    keys = sorted(groups)
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFF)
    order = [keys[i] for i in rng.permutation(len(keys))]
    n = len(manifest.records)

    test_keys = _greedy_take(order, groups, test_fraction * n) if test_fraction > 0 else []
    if test_fraction > 0 and not test_keys and len(order) >= 3:
        test_keys = [min(order, key=lambda k: len(groups[k]))]
    test_set = set(test_keys)
    remaining = [k for k in order if k not in test_set]
    val_keys = _greedy_take(remaining, groups, val_fraction * n)
    if not val_keys and len(remaining) >= 2:
        val_keys = [min(remaining, key=lambda k: len(groups[k]))]
    val_set = set(val_keys)

    def ids(ks):
        return frozenset(sid for k in ks for sid in groups[k])

    train_keys = [k for k in remaining if k not in val_set]
    return SplitSpec(ids(train_keys), ids(val_keys), ids(test_keys), int(seed))


def _select(records, ids):
    return [r for r in records if r.sample_id in ids]


def assemble_plan(
    mode,
    manifests: Sequence[DatasetManifest],
    target_domain: Optional[str] = None,
    seed: int = 0,
    val_fraction: float = 0.1,
    test_manifest: Optional[DatasetManifest] = None,
    test_fraction: float = 0.1,
) -> TrainingPlan:
    """Build the train / validation / evaluation assembly for a run.

    Multi-source: every non-target manifest is split ``1 - val_fraction``
    to ``val_fraction``; the target manifest is evaluated whole.
    Single-source: the one manifest is split and evaluated either on
    ``test_manifest`` or on a carved-out patient-level test partition.
    Each manifest's split seed is mixed with its dataset id, so the result
    does not depend on manifest order.
    """
    mode = Mode.parse(mode)
    if not manifests:
        raise PlanError("no manifests given")
    by_id = {}
    for m in manifests:
        if m.dataset_id in by_id:
            raise PlanError(f"dataset {m.dataset_id!r} given twice")
        by_id[m.dataset_id] = m

    if mode is Mode.MULTI_SOURCE:
        if target_domain is None:
            raise PlanError("multi-source mode requires a target domain")
        if target_domain not in by_id:
            raise UnknownDomainError(f"target domain {target_domain!r} not among {sorted(by_id)}")
        train, val = [], []
        for m in manifests:
            if m.dataset_id == target_domain or not m.records:
                continue
            spec = split_patient_stratified(m, val_fraction, derive(seed, m.dataset_id))
            train += _select(m.records, spec.train_ids)
            val += _select(m.records, spec.val_ids)
        if not train:
            raise PlanError("no source-domain training samples")
        return TrainingPlan(mode, train, val, target_domain, list(by_id[target_domain].records))

    if len(manifests) != 1:
        raise PlanError(f"single-source mode takes exactly one source manifest, got {len(manifests)}")
    if target_domain is not None and target_domain not in by_id:
        raise UnknownDomainError(f"target domain {target_domain!r} not among {sorted(by_id)}")
    (m,) = manifests
    if test_manifest is not None:
        spec = split_patient_stratified(m, val_fraction, derive(seed, m.dataset_id))
        held_out = list(test_manifest.records)
    else:
        spec = split_patient_stratified(m, val_fraction, derive(seed, m.dataset_id), test_fraction=test_fraction)
        held_out = _select(m.records, spec.test_ids)
    return TrainingPlan(
        mode, _select(m.records, spec.train_ids), _select(m.records, spec.val_ids), None, held_out
    )


def records_by_id(manifests: Iterable[DatasetManifest]) -> dict[str, SampleRecord]:
    out = {}
    for m in manifests:
        for r in m.records:
            out[r.sample_id] = r
    return out
