"""The five outcome labelers.

Each labeler reads only encounter metadata, never timeline codes, so labels
cannot depend on featurization choices. Malformed encounters are skipped with
a diagnostic rather than aborting the corpus.
"""

import logging
from datetime import timedelta

from clmbench.ehr import PatientTimeline, PredictionExample
from clmbench.errors import ConfigurationError

log = logging.getLogger(__name__)

TASKS = (
    "inpatient_mortality",
    "long_admission",
    "icu_transfer",
    "readmission_30d",
    "abnormal_hba1c",
)

LONG_ADMISSION_DAYS = 7
READMISSION_WINDOW_DAYS = 30
HBA1C_THRESHOLD = 6.5
HBA1C_TEST_NAME = "hba1c"


def _valid_encounters(timeline):
    for enc in timeline.encounters:
        if enc.discharge < enc.admit:
            log.warning(
                "patient %s: skipping encounter with discharge %s before admit %s",
                timeline.patient_id,
                enc.discharge,
                enc.admit,
            )
            continue
        yield enc


def _label_mortality(timeline):
    return [
        PredictionExample(timeline.patient_id, enc.admit, int(enc.died_inpatient), "inpatient_mortality")
        for enc in _valid_encounters(timeline)
    ]


def _label_long_admission(timeline):
    return [
        PredictionExample(
            timeline.patient_id,
            enc.admit,
            int((enc.discharge - enc.admit).days >= LONG_ADMISSION_DAYS),
            "long_admission",
        )
        for enc in _valid_encounters(timeline)
    ]


def _label_icu_transfer(timeline):
    # One example per inpatient day before the discharge day, skipping days
    # the patient already spends in the ICU; positive when the next day is
    # an ICU day.
    out = []
    for enc in _valid_encounters(timeline):
        day = enc.admit
        while day < enc.discharge:
            if day not in enc.icu_days:
                label = int(day + timedelta(days=1) in enc.icu_days)
                out.append(PredictionExample(timeline.patient_id, day, label, "icu_transfer"))
            day += timedelta(days=1)
    return out


def _label_readmission(timeline):
    encounters = sorted(_valid_encounters(timeline), key=lambda e: (e.admit, e.discharge))
    admits = [e.admit for e in encounters]
    out = []
    for i, enc in enumerate(encounters):
        # (0, 30] days: a same-day re-registration counts as a continuation.
        label = 0
        for admit in admits[i + 1 :]:
            gap = (admit - enc.discharge).days
            if gap > READMISSION_WINDOW_DAYS:
                break
            if 0 < gap <= READMISSION_WINDOW_DAYS:
                label = 1
                break
        out.append(PredictionExample(timeline.patient_id, enc.discharge, label, "readmission_30d"))
    return out


def _label_hba1c(timeline):
    # Prediction happens at order time, before the value returns; strictly
    # greater than the threshold, and prior diabetics are not positives.
    out = []
    for enc in _valid_encounters(timeline):
        for when, test, value in enc.lab_results:
            if test != HBA1C_TEST_NAME:
                continue
            label = int(value > HBA1C_THRESHOLD and not enc.diabetic_before)
            out.append(PredictionExample(timeline.patient_id, when, label, "abnormal_hba1c"))
    return out


_LABELERS = {
    "inpatient_mortality": _label_mortality,
    "long_admission": _label_long_admission,
    "icu_transfer": _label_icu_transfer,
    "readmission_30d": _label_readmission,
    "abnormal_hba1c": _label_hba1c,
}


def label_task(task: str, timeline: PatientTimeline):
    """All prediction examples of one task for one patient."""
    if task not in _LABELERS:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")
    return _LABELERS[task](timeline)


def label_corpus(task: str, corpus):
    out = []
    for timeline in corpus:
        out.extend(label_task(task, timeline))
    return out
