"""Patient-level record shared by cohort tools and the trainer."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class PatientRecord:
    """One censored survival observation.

    ``censored`` is True when the event was not observed (the recorded time
    is a lower bound); ``bin`` is the discrete time-bin label once
    assigned.
    """

    case_id: str
    survival_months: float
    censored: bool
    bin: int | None = None

    @classmethod
    def from_manifest_row(cls, row) -> "PatientRecord":
        return cls(case_id=row.case_id, survival_months=row.survival_months,
                   censored=row.censored)
