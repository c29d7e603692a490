"""Subject-level data containers, CSV ingestion, and the gap-time transform.

Observed data for one subject: follow-up time 𝒯 (death or censoring,
whichever came first), the event-or-censoring flag, treatment arm, baseline
covariates, and the strictly increasing recurrent-event times inside (0, 𝒯).
The model works on log gap times; the last (open) gap is always censored at
𝒯 minus the last event time.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ValidationError",
    "SubjectRecord",
    "GapRepresentation",
    "Dataset",
    "derive_gaps",
    "event_index_covariates",
    "load_dataset",
    "save_dataset",
    "MIN_GAP_DAYS",
]

# minimum gap length (days) before taking logs
MIN_GAP_DAYS = 1e-8

# jitter subtracted from tied event times under --jitter-ties
TIE_JITTER_DAYS = 1e-6


class ValidationError(ValueError):
    """Raised when input data violate the schema or its invariants."""


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's observed data. Immutable after construction."""

    subject_id: str
    followup_time: float
    death_observed: bool
    censored: bool
    treatment: int
    covariates: np.ndarray
    event_times: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.followup_time) or self.followup_time <= 0:
            raise ValidationError(
                f"subject {self.subject_id}: followup_time must be positive and finite"
            )
        if bool(self.death_observed) == bool(self.censored):
            raise ValidationError(
                f"subject {self.subject_id}: exactly one of death_observed/censored must hold"
            )
        if self.treatment not in (0, 1):
            raise ValidationError(f"subject {self.subject_id}: treatment must be 0 or 1")
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim != 1 or not np.all(np.isfinite(cov)):
            raise ValidationError(f"subject {self.subject_id}: covariates must be a finite vector")
        ev = np.asarray(self.event_times, dtype=float)
        if ev.ndim != 1:
            raise ValidationError(f"subject {self.subject_id}: event_times must be a vector")
        if ev.size:
            if not np.all(np.isfinite(ev)) or np.any(ev <= 0):
                raise ValidationError(
                    f"subject {self.subject_id}: event times must be finite and positive"
                )
            if np.any(np.diff(ev) <= 0):
                raise ValidationError(
                    f"subject {self.subject_id}: event times must be strictly increasing"
                )
            if ev[-1] >= self.followup_time:
                raise ValidationError(
                    f"subject {self.subject_id}: events must be strictly before followup_time"
                )
        cov.flags.writeable = False
        ev.flags.writeable = False
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "event_times", ev)

    @property
    def n_events(self) -> int:
        return int(self.event_times.size)


@dataclass(frozen=True)
class GapRepresentation:
    """Log-scale gap data for one subject.

    ``log_gaps`` holds the N_i observed gaps; the always-censored open gap
    contributes only its lower bound log(𝒯 − T_{N_i}).
    """

    log_gaps: np.ndarray
    open_gap_lower_bound: float
    log_terminal: float


def derive_gaps(record: SubjectRecord, min_gap: float = MIN_GAP_DAYS) -> GapRepresentation:
    """Transform event times to log gaps; floors gaps at ``min_gap`` days."""
    ev = record.event_times
    if ev.size:
        gaps = np.diff(ev, prepend=0.0)
        open_raw = record.followup_time - ev[-1]
    else:
        gaps = np.empty(0)
        open_raw = record.followup_time
    log_gaps = np.log(np.maximum(gaps, min_gap))
    open_bound = float(np.log(max(open_raw, min_gap)))
    return GapRepresentation(
        log_gaps=log_gaps,
        open_gap_lower_bound=open_bound,
        log_terminal=float(np.log(record.followup_time)),
    )


def event_index_covariates(n_events: int) -> np.ndarray:
    """Default gap-level covariate: event index j / 10 for j = 1..N_i+1
    (one row per gap including the open one)."""
    j = np.arange(1, n_events + 2, dtype=float)
    return (j / 10.0)[:, None]


@dataclass(frozen=True)
class Dataset:
    """A fixed-order collection of subjects with a common covariate dimension."""

    subjects: tuple[SubjectRecord, ...]

    def __post_init__(self):
        if not self.subjects:
            raise ValidationError("dataset is empty")
        object.__setattr__(self, "subjects", tuple(self.subjects))
        dims = {s.covariates.size for s in self.subjects}
        if len(dims) != 1:
            raise ValidationError("subjects disagree on covariate dimension")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def covariate_dim(self) -> int:
        return self.subjects[0].covariates.size

    def gaps(self) -> list[GapRepresentation]:
        return [derive_gaps(s) for s in self.subjects]

    def summary(self) -> dict:
        n_events = np.array([s.n_events for s in self.subjects])
        return {
            "n_subjects": self.n,
            "covariate_dim": self.covariate_dim,
            "n_events_total": int(n_events.sum()),
            "deaths": int(sum(s.death_observed for s in self.subjects)),
            "treated": int(sum(s.treatment for s in self.subjects)),
        }


def _parse_float(value: str, what: str, line: int, path) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"{path}:{line}: non-numeric {what} {value!r}") from None


def _jitter_duplicates(times: np.ndarray) -> np.ndarray:
    times = np.sort(times)
    out = times.copy()
    i = 0
    while i < times.size:
        j = i
        while j + 1 < times.size and times[j + 1] == times[i]:
            j += 1
        # k-th later duplicate in a run gets k jitters subtracted
        for k in range(1, j - i + 1):
            out[i + k] = times[i] - k * TIE_JITTER_DAYS
        i = j + 1
    return np.sort(out)


def load_dataset(subjects_csv, events_csv, jitter_ties: bool = False) -> Dataset:
    """Read the two-file CSV format.

    subjects.csv: id,followup_time,death_observed,treatment,x1,...,xp
    events.csv:   id,event_time

    ``jitter_ties`` resolves duplicate event times (and events at exactly
    the follow-up time) by subtracting multiples of 1e-6 days instead of
    rejecting the file.
    """
    subjects_csv = Path(subjects_csv)
    events_csv = Path(events_csv)
    for p in (subjects_csv, events_csv):
        if not p.exists():
            raise ValidationError(f"missing input file: {p}")

    with open(subjects_csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["id", "followup_time", "death_observed", "treatment"]:
            raise ValidationError(f"{subjects_csv}: bad header {header!r}")
        p_dim = len(header) - 4
        if [h for h in header[4:]] != [f"x{i + 1}" for i in range(p_dim)]:
            raise ValidationError(f"{subjects_csv}: covariate columns must be x1..xp")
        rows = []
        seen = set()
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{subjects_csv}:{ln}: expected {len(header)} fields")
            sid = row[0]
            if sid in seen:
                raise ValidationError(f"{subjects_csv}:{ln}: duplicate subject id {sid!r}")
            seen.add(sid)
            followup = _parse_float(row[1], "followup_time", ln, subjects_csv)
            death = _parse_float(row[2], "death_observed", ln, subjects_csv)
            if death not in (0.0, 1.0):
                raise ValidationError(f"{subjects_csv}:{ln}: death_observed must be 0 or 1")
            treat = _parse_float(row[3], "treatment", ln, subjects_csv)
            if treat not in (0.0, 1.0):
                raise ValidationError(f"{subjects_csv}:{ln}: treatment must be 0 or 1")
            covs = [_parse_float(v, f"x{i + 1}", ln, subjects_csv) for i, v in enumerate(row[4:])]
            rows.append((sid, followup, bool(death), int(treat), np.array(covs)))

    events: dict[str, list[float]] = {sid: [] for sid, *_ in rows}
    with open(events_csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "event_time"]:
            raise ValidationError(f"{events_csv}: bad header {header!r}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{events_csv}:{ln}: expected 2 fields")
            sid, t = row
            if sid not in events:
                raise ValidationError(f"{events_csv}:{ln}: event for unknown subject id {sid!r}")
            events[sid].append(_parse_float(t, "event_time", ln, events_csv))

    subjects = []
    for sid, followup, death, treat, covs in rows:
        ev = np.sort(np.array(events[sid], dtype=float))
        if jitter_ties and ev.size:
            ev[ev >= followup] = followup - TIE_JITTER_DAYS
            ev = _jitter_duplicates(ev)
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                followup_time=followup,
                death_observed=death,
                censored=not death,
                treatment=treat,
                covariates=covs,
                event_times=ev,
            )
        )
    return Dataset(subjects=tuple(subjects))


def save_dataset(dataset: Dataset, subjects_csv, events_csv) -> None:
    """Write the two-file CSV format (full float precision, stable order)."""
    p = dataset.covariate_dim
    with open(subjects_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "followup_time", "death_observed", "treatment"] + [f"x{i + 1}" for i in range(p)])
        for s in dataset.subjects:
            w.writerow(
                [s.subject_id, repr(s.followup_time), int(s.death_observed), s.treatment]
                + [repr(float(x)) for x in s.covariates]
            )
    with open(events_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "event_time"])
        for s in dataset.subjects:
            for t in s.event_times:
                w.writerow([s.subject_id, repr(float(t))])
