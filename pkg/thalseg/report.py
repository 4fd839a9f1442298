"""Volumetry reports and normative bounds.

Functions:
- compute_volumes(left, right, spacing): voxel counts and mm3 per structure and side
- asymmetry(left, right): 200 * (L - R) / (L + R), None when both are zero
- build_report(...): volumes plus % ICV, asymmetry and normative flags
- fit_normative(population): sliding-window percentile bounds per sex
- compare_dispersion(a, b): bound widths of two normative models, paired test
- write_report(report, directory): report.json and report.csv
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import Field, model_validator

from .base import StrictModel
from .errors import DataError
from .losses_metrics import WHOLE_THALAMUS, WilcoxonResult, wilcoxon_signed_rank
from .volumes import LabelMap, Side

logger = logging.getLogger(__name__)

SIDES = (Side.LEFT.value, Side.RIGHT.value)
REPORT_COLUMNS = ["structure", "side", "voxels", "volume_mm3", "percent_icv", "asymmetry", "flag"]
MIN_SUBJECTS_PER_SEX = 20


def volume_key(structure: str, side: str) -> str:
    return f"{side}:{structure}"


@dataclass
class VolumeRow:
    structure: str
    side: str
    voxels: int
    volume_mm3: float
    percent_icv: Optional[float] = None
    asymmetry: Optional[float] = None
    flag: Optional[str] = None


@dataclass
class VolumetryReport:
    rows: List[VolumeRow]
    voxel_mm3: float
    subject_id: str = "subject"
    age: Optional[float] = None
    sex: Optional[str] = None
    icv_mm3: Optional[float] = None
    provenance: Dict = field(default_factory=dict)

    def row(self, structure: str, side: str) -> VolumeRow:
        for r in self.rows:
            if r.structure == structure and r.side == side:
                return r
        raise KeyError((structure, side))

    def volumes(self, unit: str = "mm3") -> Dict[str, float]:
        """Flat {side:structure -> value} mapping used for normative fitting."""
        attr = "percent_icv" if unit == "percent_icv" else "volume_mm3"
        return {volume_key(r.structure, r.side): getattr(r, attr) for r in self.rows}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.rows], columns=REPORT_COLUMNS)

    def to_dict(self) -> Dict:
        return {
            "subject": {"id": self.subject_id, "age": self.age, "sex": self.sex},
            "icv_mm3": self.icv_mm3,
            "voxel_mm3": self.voxel_mm3,
            "normalization": "percent of ICV",
            "structures": [vars(r) for r in self.rows],
            "provenance": self.provenance,
        }


def compute_volumes(left: LabelMap, right: LabelMap, spacing: Optional[Sequence[float]] = None) -> VolumetryReport:
    """Per-structure and whole-thalamus volumes of both sides.

    `spacing` defaults to the label maps' own spacing.
    """
    if left.schema != right.schema:
        raise DataError("left and right label maps use different schemas")
    spacing = tuple(left.spacing if spacing is None else spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise DataError(f"spacing must be three positive values, got {spacing}")
    voxel_mm3 = float(np.prod(np.asarray(spacing, dtype=np.float64)))
    rows = []
    for side, labels in zip(SIDES, (left, right)):
        counts = labels.counts()
        for label, name in labels.schema.entries:
            rows.append(VolumeRow(name, side, counts[label], counts[label] * voxel_mm3))
        whole = int(np.count_nonzero(labels.data > 0))
        rows.append(VolumeRow(WHOLE_THALAMUS, side, whole, whole * voxel_mm3))
    return VolumetryReport(rows, voxel_mm3)


def asymmetry(left_vol: float, right_vol: float) -> Optional[float]:
    total = left_vol + right_vol
    if total == 0:
        return None
    if left_vol < 0 or right_vol < 0:
        raise DataError("volumes must be nonnegative")
    return 200.0 * (left_vol - right_vol) / total


class NormativeBin(StrictModel):
    age_lo: float
    age_hi: float
    lower: float
    upper: float
    n: int

    @model_validator(mode="after")
    def _ordered(self):
        if self.lower > self.upper:
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")
        return self

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def centre(self) -> float:
        return (self.age_lo + self.age_hi) / 2


class NormativeModel(StrictModel):
    """Percentile bounds per structure key and sex over sliding age windows."""

    unit: str = "mm3"
    lower_pct: float = 5.0
    upper_pct: float = 95.0
    window: float = 10.0
    step: float = 5.0
    bins: Dict[str, Dict[str, List[NormativeBin]]] = Field(default_factory=dict)

    def bounds(self, key: str, sex: str, age: float) -> Optional[Tuple[float, float]]:
        """Bounds of the window whose centre is closest to `age` (None if unknown)."""
        bins = self.bins.get(key, {}).get(sex)
        if not bins:
            return None
        best = min(bins, key=lambda b: (abs(b.centre - age), b.age_lo))
        return best.lower, best.upper

    def widths(self) -> Dict[str, List[float]]:
        out = {}
        for key, per_sex in self.bins.items():
            out[key] = [b.width for sex in sorted(per_sex) for b in per_sex[sex]]
        return out

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.model_dump_json(indent=2))
        return path

    @classmethod
    def load(cls, path: str) -> "NormativeModel":
        if not os.path.exists(path):
            raise DataError(f"missing normative model file: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            return cls.model_validate(json.load(fh))


def population_frame(population: Union[pd.DataFrame, Iterable]) -> pd.DataFrame:
    """Long table with columns subject, age, sex, key, value.

    Accepts a long DataFrame (with those columns), a wide DataFrame (age, sex
    and one column per key, one row per subject), VolumetryReports, or
    (age, sex, {key: value}) tuples.
    """
    columns = ["subject", "age", "sex", "key", "value"]
    if isinstance(population, pd.DataFrame):
        if set(columns) <= set(population.columns):
            frame = population[columns].copy()
        else:
            wide = population.reset_index(drop=True).rename_axis("subject").reset_index()
            frame = wide.melt(id_vars=["subject", "age", "sex"], var_name="key", value_name="value")
    else:
        records = []
        for i, item in enumerate(population):
            if isinstance(item, VolumetryReport):
                age, sex, vols = item.age, item.sex, item.volumes()
            else:
                age, sex, vols = item
            records += [(i, age, sex, k, v) for k, v in vols.items()]
        frame = pd.DataFrame(records, columns=columns)
    if frame[["age", "sex"]].isna().any().any():
        raise DataError("every population subject needs an age and a sex")
    frame["age"] = frame["age"].astype(float)
    frame["value"] = frame["value"].astype(float)
    return frame


def _windows(age_min: float, age_max: float, window: float, step: float) -> List[Tuple[float, float]]:
    starts = [age_min]
    while starts[-1] + window < age_max:
        starts.append(starts[-1] + step)
    return [(a, a + window) for a in starts]


def fit_normative(population, window: float = 10.0, step: float = 5.0, lower_pct: float = 5.0,
                  upper_pct: float = 95.0, age_range: Optional[Tuple[float, float]] = None,
                  min_per_sex: int = MIN_SUBJECTS_PER_SEX, unit: str = "mm3") -> NormativeModel:
    """Sliding-window percentile bounds per structure key and sex.

    A window with no subjects borrows the nearest subjects by age (as many
    as the smallest populated window) so every bin has bounds.
    """
    if not 0 <= lower_pct <= upper_pct <= 100:
        raise DataError(f"invalid percentiles {lower_pct}/{upper_pct}")
    if step <= 0 or window < step:
        raise DataError("window must be at least as long as a positive step")
    frame = population_frame(population)
    if frame.empty:
        raise DataError("empty normative population")
    lo, hi = age_range or (float(frame["age"].min()), float(frame["age"].max()))
    windows = _windows(lo, hi, window, step)
    model = NormativeModel(unit=unit, lower_pct=lower_pct, upper_pct=upper_pct, window=window, step=step)

    for sex, by_sex in frame.groupby("sex", sort=True):
        values = by_sex.pivot_table(index="subject", columns="key", values="value", aggfunc="first")
        n_subjects = len(values)
        if n_subjects < min_per_sex:
            raise DataError(f"{n_subjects} subjects of sex {sex!r}, need at least {min_per_sex}")
        ages = by_sex.groupby("subject")["age"].first().reindex(values.index).to_numpy()
        members = [np.flatnonzero((ages >= a) & (ages < b + (1e-9 if b >= hi else 0))) for a, b in windows]
        populated = [len(m) for m in members if len(m)]
        fallback = min(populated) if populated else n_subjects
        for (a, b), idx in zip(windows, members):
            if len(idx) == 0:
                centre = (a + b) / 2
                idx = np.argsort(np.abs(ages - centre), kind="stable")[:fallback]
                logger.warning("no %s subjects aged %.0f-%.0f; using the %d nearest", sex, a, b, len(idx))
            for key in values.columns:
                v = values[key].to_numpy()[idx]
                lower, upper = np.percentile(v, [lower_pct, upper_pct])
                model.bins.setdefault(key, {}).setdefault(str(sex), []).append(
                    NormativeBin(age_lo=a, age_hi=b, lower=float(lower), upper=float(upper), n=len(idx)))
    logger.info("fitted normative bounds for %d keys over %d age windows", len(model.bins), len(windows))
    return model


@dataclass
class DispersionComparison:
    per_structure: pd.DataFrame
    overall: WilcoxonResult

    @property
    def n_significant(self) -> int:
        return int((self.per_structure["p_value"] < 0.05).sum())


def compare_dispersion(model_a: NormativeModel, model_b: NormativeModel) -> DispersionComparison:
    """Per-structure mean bound widths and paired tests between two models."""
    wa, wb = model_a.widths(), model_b.widths()
    keys = sorted(set(wa) & set(wb))
    if not keys:
        raise DataError("the normative models share no structures")
    rows = []
    for key in keys:
        if len(wa[key]) != len(wb[key]):
            raise DataError(f"models bin {key} differently ({len(wa[key])} vs {len(wb[key])} bins)")
        try:
            p = wilcoxon_signed_rank(wa[key], wb[key]).p_value
        except DataError:
            p = None
        rows.append({"key": key, "width_a": float(np.mean(wa[key])), "width_b": float(np.mean(wb[key])),
                     "p_value": p})
    table = pd.DataFrame(rows)
    overall = wilcoxon_signed_rank(table["width_a"].to_numpy(), table["width_b"].to_numpy())
    return DispersionComparison(table, overall)


def _flag(value: float, bounds: Optional[Tuple[float, float]]) -> Optional[str]:
    if bounds is None:
        return None
    if value < bounds[0]:
        return "below"
    if value > bounds[1]:
        return "above"
    return "within"


def build_report(left: LabelMap, right: LabelMap, icv_mm3: Optional[float] = None, subject_id: str = "subject",
                 age: Optional[float] = None, sex: Optional[str] = None,
                 normative: Optional[NormativeModel] = None, provenance: Optional[Dict] = None) -> VolumetryReport:
    report = compute_volumes(left, right)
    report.subject_id, report.age, report.sex, report.icv_mm3 = subject_id, age, sex, icv_mm3
    report.provenance = dict(provenance or {})
    if icv_mm3 is not None and icv_mm3 <= 0:
        raise DataError(f"ICV must be positive, got {icv_mm3}")
    for r in report.rows:
        if icv_mm3:
            r.percent_icv = 100.0 * r.volume_mm3 / icv_mm3
        other = report.row(r.structure, Side.RIGHT.value if r.side == Side.LEFT.value else Side.LEFT.value)
        r.asymmetry = asymmetry(r.volume_mm3, other.volume_mm3) if r.side == Side.LEFT.value \
            else asymmetry(other.volume_mm3, r.volume_mm3)
    if normative is not None:
        if age is None or sex is None:
            logger.warning("subject %s has no age/sex; normative flags skipped", subject_id)
        elif normative.unit == "percent_icv" and not icv_mm3:
            logger.warning("normative model is in %% ICV but no ICV was given; flags skipped")
        else:
            for r in report.rows:
                value = r.percent_icv if normative.unit == "percent_icv" else r.volume_mm3
                r.flag = _flag(value, normative.bounds(volume_key(r.structure, r.side), sex, age))
    return report


def write_report(report: VolumetryReport, directory: str) -> Dict[str, str]:
    os.makedirs(directory, exist_ok=True)
    paths = {"json": os.path.join(directory, "report.json"), "csv": os.path.join(directory, "report.csv")}
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    report.to_frame().to_csv(paths["csv"], index=False)
    logger.info("wrote volumetry report for %s to %s", report.subject_id, directory)
    return paths
