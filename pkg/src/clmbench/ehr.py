"""Patient timeline data model: codes, vocabularies, ontologies, splits.

A patient record is an ordered sequence of days, each holding a set of coded
events. Outcome information lives only in encounter metadata so labels are
invariant to featurization choices. All types are immutable after
construction; the operations here are pure.
"""

import logging
from dataclasses import dataclass, field
from datetime import date

from clmbench.errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

FAMILIES = ("diagnosis", "procedure", "medication", "lab-order", "demographic")


@dataclass(frozen=True, order=True)
class CodeId:
    """One coded event type, unique within a vocabulary by (family, token)."""

    family: str
    token: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown code family {self.family!r}")
        if not self.token:
            raise DataError("empty code token")

    def __str__(self):
        return f"{self.family}:{self.token}"

    @classmethod
    def parse(cls, text: str) -> "CodeId":
        family, sep, token = text.partition(":")
        if not sep:
            raise DataError(f"code {text!r} is not in family:token form")
        return cls(family, token)


class CodeVocabulary:
    """Deterministically ordered code set with dense 0..|V|-1 indices."""

    def __init__(self, codes):
        ordered = sorted(set(codes))
        self.codes: tuple = tuple(ordered)
        self.index: dict = {c: i for i, c in enumerate(ordered)}

    def __len__(self):
        return len(self.codes)

    def __contains__(self, code):
        return code in self.index

    def __eq__(self, other):
        return isinstance(other, CodeVocabulary) and self.codes == other.codes

    def __getitem__(self, i) -> CodeId:
        return self.codes[i]


class Ontology:
    """Per-family rooted trees over codes; drives expansion and hierarchy scores.

    The parent relation is a forest: every non-root node has exactly one
    parent and every node reaches its family root. Multi-parent input edges
    are resolved to the lexicographically smallest parent at load time.
    """

    def __init__(self, parent: dict):
        self.parent = dict(parent)
        self.nodes = set(self.parent)
        for p in self.parent.values():
            self.nodes.add(p)
        self.roots = {}
        for node in sorted(self.nodes):
            if node not in self.parent:
                if node.family in self.roots:
                    raise DataError(
                        f"family {node.family!r} has two roots: "
                        f"{self.roots[node.family]} and {node}"
                    )
                self.roots[node.family] = node
        self._check_forest()
        self._children = {}
        for child, p in self.parent.items():
            self._children.setdefault(p, []).append(child)
        for kids in self._children.values():
            kids.sort()

    def _check_forest(self):
        for start in self.nodes:
            seen = {start}
            node = start
            while node in self.parent:
                node = self.parent[node]
                if node in seen:
                    raise DataError(f"ontology cycle through {node}")
                seen.add(node)
            if node != self.roots.get(node.family):
                raise DataError(f"node {start} does not reach its family root")

    def children(self, node):
        return tuple(self._children.get(node, ()))

    def is_root(self, node) -> bool:
        return node in self.roots.values()

    def path_to_root(self, code) -> list:
        """Nodes from `code` up to and including its family root."""
        path = [code]
        node = code
        while node in self.parent:
            node = self.parent[node]
            path.append(node)
        return path

    @classmethod
    def from_edges(cls, edges) -> "Ontology":
        """Build from (child, parent) pairs, projecting multi-parent nodes.

        A child listed under several parents keeps only the lexicographically
        smallest one; the hierarchy needs unique root paths.
        """
        parent = {}
        dropped = 0
        for child, par in edges:
            if child in parent and parent[child] != par:
                dropped += 1
                parent[child] = min(parent[child], par)
            else:
                parent[child] = par
        if dropped:
            log.info("ontology: resolved %d multi-parent edges to smallest parent", dropped)
        return cls(parent)


@dataclass(frozen=True)
class DayRecord:
    """All codes recorded on one calendar day."""

    date: date
    codes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "codes", frozenset(self.codes))


@dataclass(frozen=True)
class EncounterMeta:
    """Admission-level outcome metadata; values here never become features."""

    admit: date
    discharge: date
    died_inpatient: bool = False
    icu_days: frozenset = frozenset()
    lab_results: tuple = ()  # (date, test name, numeric value)
    diabetic_before: bool = False

    def __post_init__(self):
        object.__setattr__(self, "icu_days", frozenset(self.icu_days))
        object.__setattr__(self, "lab_results", tuple(self.lab_results))
        if self.discharge < self.admit:
            raise DataError(f"encounter discharge {self.discharge} before admit {self.admit}")
        for d in self.icu_days:
            if not self.admit <= d <= self.discharge:
                raise DataError(f"icu day {d} outside [{self.admit}, {self.discharge}]")


@dataclass(frozen=True)
class PatientTimeline:
    """One patient's record: strictly date-ordered days plus encounters."""

    patient_id: str
    birth_date: date
    days: tuple = ()
    encounters: tuple = ()
    demographics: tuple = ()  # raw demographic tokens, encoded onto the birth day

    def __post_init__(self):
        object.__setattr__(self, "days", tuple(self.days))
        object.__setattr__(self, "encounters", tuple(self.encounters))
        object.__setattr__(self, "demographics", tuple(self.demographics))
        for prev, cur in zip(self.days, self.days[1:]):
            if cur.date <= prev.date:
                raise DataError(f"patient {self.patient_id}: days not strictly increasing")
        if self.days and self.days[0].date < self.birth_date:
            raise DataError(f"patient {self.patient_id}: first day precedes birth date")


@dataclass(frozen=True)
class PredictionExample:
    """(patient, time of prediction, binary label) for one task."""

    patient_id: str
    prediction_time: date
    label: int
    task: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0/1, got {self.label}")


def build_vocabulary(corpus, min_patients: int = 25) -> CodeVocabulary:
    """Codes found in the records of at least `min_patients` distinct patients.

    Counting is patient-distinct: one patient repeating a code contributes one.
    """
    if min_patients < 1:
        raise ConfigurationError("min_patients must be >= 1")
    corpus = list(corpus)
    if not corpus:
        raise DataError("empty corpus")
    patient_counts = {}
    for timeline in corpus:
        seen = set()
        for day in timeline.days:
            seen.update(day.codes)
        for code in seen:
            patient_counts[code] = patient_counts.get(code, 0) + 1
    kept = [c for c, n in patient_counts.items() if n >= min_patients]
    return CodeVocabulary(kept)


def expand_ancestors(codes, ontology: Ontology, include_root: bool = True) -> frozenset:
    """Union of every code's root path (self plus all ancestors).

    Codes absent from the ontology pass through unexpanded, with a log note.
    """
    out = set()
    missing = 0
    for code in codes:
        if code in ontology.nodes:
            path = ontology.path_to_root(code)
            out.update(path if include_root else path[:-1] or [code])
        else:
            missing += 1
            out.add(code)
    if missing:
        log.debug("expand_ancestors: %d codes not in ontology passed through", missing)
    return frozenset(out)


def encode_demographics(timeline: PatientTimeline, tokens=None) -> PatientTimeline:
    """Attach demographic codes to the birth-date day.

    Uses `timeline.demographics` when `tokens` is not given. Merging is a set
    union, so applying twice equals applying once.
    """
    tokens = timeline.demographics if tokens is None else tuple(tokens)
    if not tokens:
        return timeline
    demo_codes = {CodeId("demographic", t) for t in tokens}
    days = list(timeline.days)
    slot = None
    for i, day in enumerate(days):
        if day.date == timeline.birth_date:
            slot = i
            break
        if day.date > timeline.birth_date:
            break
    if slot is None:
        record = DayRecord(timeline.birth_date, frozenset(demo_codes))
        days = sorted(days + [record], key=lambda d: d.date)
    else:
        days[slot] = DayRecord(timeline.birth_date, days[slot].codes | demo_codes)
    return PatientTimeline(
        patient_id=timeline.patient_id,
        birth_date=timeline.birth_date,
        days=tuple(days),
        encounters=timeline.encounters,
        demographics=tokens,
    )


@dataclass(frozen=True)
class SplitBoundaries:
    """Window edges for the temporal split.

    Train is everything through `train_end` inclusive; dev and test are
    half-open [start, end) windows. Gaps between windows are allowed and
    examples falling in a gap are dropped.
    """

    train_end: date
    dev_start: date
    dev_end: date
    test_start: date
    test_end: date

    def __post_init__(self):
        ordered = (self.train_end, self.dev_start, self.dev_end, self.test_start, self.test_end)
        for a, b in zip(ordered, ordered[1:]):
            if b < a:
                raise ConfigurationError(f"split boundaries out of order: {a} > {b}")
        if self.dev_start <= self.train_end:
            raise ConfigurationError("dev window overlaps the train window")
        if self.test_start < self.dev_end:
            raise ConfigurationError("test window overlaps the dev window")

    def window_of(self, when: date):
        if when <= self.train_end:
            return "train"
        if self.dev_start <= when < self.dev_end:
            return "dev"
        if self.test_start <= when < self.test_end:
            return "test"
        return None


def temporal_split(examples, boundaries: SplitBoundaries):
    """Assign examples to train/dev/test by prediction time only.

    Returns a dict of split name -> list. A patient may appear in several
    splits, but any single prediction time lands in at most one window.
    """
    splits = {"train": [], "dev": [], "test": []}
    for ex in examples:
        window = boundaries.window_of(ex.prediction_time)
        if window is not None:
            splits[window].append(ex)
    return splits
