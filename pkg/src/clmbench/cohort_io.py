"""File formats: JSON-lines cohorts, TSV ontologies, JSON-lines examples.

One patient per line keeps cohorts streamable and byte-stable: generation
with the same seed reproduces files exactly, which the run manifests rely on.
"""

import json
import logging
from datetime import date

from clmbench.ehr import (
    CodeId,
    DayRecord,
    EncounterMeta,
    Ontology,
    PatientTimeline,
    PredictionExample,
)
from clmbench.errors import DataError

log = logging.getLogger(__name__)


def _iso(d: date) -> str:
    return d.isoformat()


def timeline_to_json(timeline: PatientTimeline) -> dict:
    return {
        "patient_id": timeline.patient_id,
        "birth_date": _iso(timeline.birth_date),
        "demographics": list(timeline.demographics),
        "days": [
            {"date": _iso(day.date), "codes": sorted(str(c) for c in day.codes)}
            for day in timeline.days
        ],
        "encounters": [
            {
                "admit": _iso(enc.admit),
                "discharge": _iso(enc.discharge),
                "died": bool(enc.died_inpatient),
                "icu_days": sorted(_iso(d) for d in enc.icu_days),
                "labs": [
                    {"date": _iso(d), "test": t, "value": v} for d, t, v in enc.lab_results
                ],
                "diabetic_before": bool(enc.diabetic_before),
            }
            for enc in timeline.encounters
        ],
    }


def timeline_from_json(obj: dict) -> PatientTimeline:
    encounters = []
    for e in obj.get("encounters", ()):
        try:
            encounters.append(
                EncounterMeta(
                    admit=date.fromisoformat(e["admit"]),
                    discharge=date.fromisoformat(e["discharge"]),
                    died_inpatient=bool(e.get("died", False)),
                    icu_days=frozenset(date.fromisoformat(d) for d in e.get("icu_days", ())),
                    lab_results=tuple(
                        (date.fromisoformat(lab["date"]), lab["test"], float(lab["value"]))
                        for lab in e.get("labs", ())
                    ),
                    diabetic_before=bool(e.get("diabetic_before", False)),
                )
            )
        except DataError as err:
            log.warning("patient %s: dropping malformed encounter: %s", obj["patient_id"], err)
    return PatientTimeline(
        patient_id=obj["patient_id"],
        birth_date=date.fromisoformat(obj["birth_date"]),
        days=tuple(
            DayRecord(date.fromisoformat(d["date"]), frozenset(CodeId.parse(c) for c in d["codes"]))
            for d in obj.get("days", ())
        ),
        encounters=tuple(encounters),
        demographics=tuple(obj.get("demographics", ())),
    )


def write_cohort(path, corpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for timeline in corpus:
            fh.write(json.dumps(timeline_to_json(timeline), sort_keys=True))
            fh.write("\n")


def read_cohort(path):
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                corpus.append(timeline_from_json(json.loads(line)))
    return corpus


def write_ontology(path, ontology: Ontology) -> None:
    """TSV edge list, one `child<TAB>parent` line, one #family block each."""
    by_family = {}
    for child, parent in ontology.parent.items():
        by_family.setdefault(child.family, []).append((child.token, parent.token))
    with open(path, "w", encoding="utf-8") as fh:
        for family in sorted(by_family):
            fh.write(f"#family={family}\n")
            for child, parent in sorted(by_family[family]):
                fh.write(f"{child}\t{parent}\n")


def read_ontology(path) -> Ontology:
    edges = []
    family = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#family="):
                family = line.split("=", 1)[1]
                continue
            if family is None:
                raise DataError(f"{path}:{lineno}: edge before any #family header")
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected child<TAB>parent")
            edges.append((CodeId(family, parts[0]), CodeId(family, parts[1])))
    return Ontology.from_edges(edges)


def write_examples(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "patient_id": ex.patient_id,
                        "prediction_time": _iso(ex.prediction_time),
                        "label": ex.label,
                        "task": ex.task,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def read_examples(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                PredictionExample(
                    obj["patient_id"],
                    date.fromisoformat(obj["prediction_time"]),
                    int(obj["label"]),
                    obj["task"],
                )
            )
    return out
