"""Seeded synthetic cohort generator with planted outcome signal.

Patients carry latent disease modules that progress through ordered severity
stages and eventually remit. Stage-specific codes are emitted at visits while
a module is active; remission is silent, so the current stage is recoverable
from the order and recency of events but not from the bag of codes alone.
Outcomes are driven by the current stages through logistic links (plus a few
module-pair interactions), making them predictable from code history while
rewarding models that track the sequence.

All randomness flows from one master seed through per-patient counter-based
substreams, so patient i depends only on (seed, i) and generation can be
parallelized without changing output.
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from clmbench.ehr import (
    CodeId,
    DayRecord,
    EncounterMeta,
    Ontology,
    PatientTimeline,
)
from clmbench.errors import ConfigurationError, DataError
from clmbench.labelers import HBA1C_TEST_NAME, TASKS
from clmbench.rng import substream

log = logging.getLogger(__name__)

CLINICAL_FAMILIES = ("diagnosis", "procedure", "medication", "lab-order")

_FAMILY_PREFIX = {
    "diagnosis": "dx",
    "procedure": "px",
    "medication": "rx",
    "lab-order": "lb",
}

_DEMOGRAPHIC_TOKENS = (
    "gender_F",
    "gender_M",
    "race_r0",
    "race_r1",
    "race_r2",
    "race_r3",
    "ethnicity_e0",
    "ethnicity_e1",
)

DEFAULT_PREVALENCES = {
    "inpatient_mortality": 0.02,
    "long_admission": 0.23,
    "icu_transfer": 0.025,
    "readmission_30d": 0.16,
    "abnormal_hba1c": 0.04,
}

# Logit contribution of each severity stage; the remitted state is silent and
# carries no risk, which is what makes event order informative.
_STAGE_WEIGHT = (0.35, 1.0, 2.0)
_NEVER, _REMITTED = -1, 3
_DWELL_THRESHOLD = 2  # visits at the final stage before the step term fires

_ADMISSIONS_PER_PATIENT = 0.85
_LOS_CAP = 40
_ADMISSION_HEADROOM_DAYS = 45
_INPATIENT_EMIT_CAP = 12
_HBA1C_VALUE_SD = 0.40


@dataclass(frozen=True)
class CohortConfig:
    num_patients: int = 20000
    seed: int = 0
    codes_per_family: int = 300
    ontology_branching: int = 7
    ontology_depth: int = 3
    num_disease_modules: int = 12
    visit_rate: float = 1.3  # base outpatient visits per year
    target_prevalences: dict = field(default_factory=lambda: dict(DEFAULT_PREVALENCES))
    date_range: tuple = (date(2012, 1, 1), date(2017, 8, 1))

    def __post_init__(self):
        for name in ("num_patients", "codes_per_family", "ontology_branching",
                     "ontology_depth", "num_disease_modules"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.visit_rate <= 0:
            raise ConfigurationError("visit_rate must be positive")
        for task, p in self.target_prevalences.items():
            if task not in TASKS:
                raise ConfigurationError(f"unknown task {task!r} in target_prevalences")
            if not 0.0 < p <= 0.5:
                raise ConfigurationError(f"prevalence for {task} must be in (0, 0.5], got {p}")
        if self.date_range[0] >= self.date_range[1]:
            raise ConfigurationError("date_range start must precede end")


@dataclass(frozen=True)
class DiseaseModule:
    """One latent condition: staged code emissions plus outcome effects."""

    id: int
    stage_codes: tuple  # one tuple of CodeId per active stage
    visit_multiplier: float
    admission_effect: float
    effects: dict  # task -> base logit effect, scaled by the stage weight
    onset_hazard: float  # per year
    progression: tuple  # ordered severity states, strictly forward
    advance_rate: float  # per year
    remit_rate: float  # per year, from the final stage

    def __post_init__(self):
        if len(self.progression) != len(set(self.progression)):
            raise DataError(f"module {self.id}: progression chain repeats a state")
        for value in self.effects.values():
            if not math.isfinite(value):
                raise DataError(f"module {self.id}: non-finite effect size")


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x > -40 else 0.0


def _norm_sf(z):
    """P(N(0,1) > z)."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def generate_ontology(config: CohortConfig, rng: np.random.Generator) -> Ontology:
    """Per-family rooted trees; leaves are the emittable codes.

    Leaf count per clinical family is min(codes_per_family, branching**depth).
    The demographic family is a flat tree under its own root.
    """
    if config.ontology_branching < 2 or config.ontology_depth < 2:
        raise ConfigurationError("need branching >= 2 and depth >= 2")
    edges = []
    branching = config.ontology_branching
    n_leaves = min(config.codes_per_family, branching**config.ontology_depth)
    for family in CLINICAL_FAMILIES:
        prefix = _FAMILY_PREFIX[family]
        leaves = [CodeId(family, f"{prefix}{i:04d}") for i in range(n_leaves)]
        order = rng.permutation(n_leaves)
        level_nodes = [leaves[i] for i in order]
        level = 0
        while len(level_nodes) > 1:
            level += 1
            n_groups = math.ceil(len(level_nodes) / branching)
            if n_groups == 1:
                parents = [CodeId(family, f"{prefix}.root")]
            else:
                parents = [CodeId(family, f"{prefix}.g{level}.{j:03d}") for j in range(n_groups)]
            for i, node in enumerate(level_nodes):
                edges.append((node, parents[i // branching]))
            level_nodes = parents
    demo_root = CodeId("demographic", "dem.root")
    for token in _DEMOGRAPHIC_TOKENS:
        edges.append((CodeId("demographic", token), demo_root))
    return Ontology.from_edges(edges)


def _leaves_by_family(ontology: Ontology):
    out = {}
    for node in sorted(ontology.nodes):
        if not ontology.children(node):
            out.setdefault(node.family, []).append(node)
    return out


def _build_modules(config: CohortConfig, ontology: Ontology, rng: np.random.Generator):
    """Draw disease modules with disjoint code pools and task effect sizes."""
    leaves = _leaves_by_family(ontology)
    # reserve the hba1c order code and global acute-deterioration markers
    hba1c_code = leaves["lab-order"][0]
    markers = tuple(leaves["procedure"][:4]) + tuple(leaves["lab-order"][1:3])
    reserved = {hba1c_code, *markers}
    free = {
        fam: [c for c in leaves[fam] if c not in reserved] for fam in CLINICAL_FAMILIES
    }
    per_stage = {"diagnosis": 3, "procedure": 2, "medication": 2, "lab-order": 1}
    n_stages = len(_STAGE_WEIGHT)
    modules = []
    for mid in range(config.num_disease_modules):
        stage_codes = [[] for _ in range(n_stages)]
        for fam, per in per_stage.items():
            pool = free[fam]
            need = per * n_stages
            if len(pool) < need:
                raise ConfigurationError(
                    f"codes_per_family={config.codes_per_family} too small for "
                    f"{config.num_disease_modules} disease modules"
                )
            # cluster the module's codes inside one subtree when possible so
            # ontology expansion carries real structure
            anchor = pool[int(rng.integers(len(pool)))]
            group = ontology.parent.get(anchor)
            in_group = [c for c in pool if ontology.parent.get(c) == group]
            chosen = []
            take = list(rng.permutation(len(in_group))[:need])
            chosen = [in_group[i] for i in take]
            if len(chosen) < need:
                rest = [c for c in pool if c not in set(chosen)]
                idx = rng.permutation(len(rest))[: need - len(chosen)]
                chosen.extend(rest[i] for i in idx)
            for s in range(n_stages):
                stage_codes[s].extend(chosen[s * per : (s + 1) * per])
            free[fam] = [c for c in pool if c not in set(chosen)]
        effects = {}
        for task in TASKS:
            strong = rng.random() < 0.45
            effects[task] = float(rng.uniform(0.9, 1.7) if strong else rng.uniform(0.05, 0.35))
        modules.append(
            DiseaseModule(
                id=mid,
                stage_codes=tuple(tuple(s) for s in stage_codes),
                visit_multiplier=float(rng.uniform(1.15, 1.6)),
                admission_effect=float(rng.uniform(0.25, 0.7)),
                effects=effects,
                onset_hazard=float(rng.uniform(0.02, 0.05)),
                progression=("stage0", "stage1", "stage2", "remitted"),
                advance_rate=float(rng.uniform(0.45, 0.9)),
                remit_rate=float(rng.uniform(0.3, 0.6)),
            )
        )
    interactions = {}
    for task in TASKS:
        ranked = sorted(modules, key=lambda m: -m.effects[task])
        pairs = []
        if len(ranked) >= 6:
            pairs.append((ranked[0].id, ranked[2].id, float(rng.uniform(1.1, 1.7))))
            pairs.append((ranked[1].id, ranked[3].id, float(rng.uniform(1.1, 1.7))))
            pairs.append((ranked[0].id, ranked[4].id, float(rng.uniform(1.1, 1.7))))
        interactions[task] = tuple(pairs)
    # threshold terms: risk jumps once a module has spent two or more visits
    # at its final stage; a step in visit counts rather than a linear trend
    dwell_terms = {}
    for task in TASKS:
        ranked = sorted(modules, key=lambda m: -m.effects[task])
        dwell_terms[task] = tuple(
            (m.id, float(rng.uniform(1.3, 1.9))) for m in ranked[:3]
        )
    return modules, interactions, dwell_terms, hba1c_code, markers


class _Latents:
    """Per-example link probabilities, the generator's own oracle."""

    def __init__(self):
        self.probs = {}

    def record(self, patient_id, when, task, prob):
        self.probs[(patient_id, when, task)] = prob


class _CohortModel:
    """Shared read-only state: ontology, modules, calibrated intercepts."""

    def __init__(self, config: CohortConfig):
        self.config = config
        self.ontology = generate_ontology(config, substream(config.seed, "ontology"))
        (
            self.modules,
            self.interactions,
            self.dwell_terms,
            self.hba1c_code,
            self.markers,
        ) = _build_modules(config, self.ontology, substream(config.seed, "modules"))
        leaves = _leaves_by_family(self.ontology)
        self.background_pool = tuple(
            c for fam in CLINICAL_FAMILIES for c in leaves[fam]
        )
        self.start = config.date_range[0].toordinal()
        self.end = config.date_range[1].toordinal()
        self.span_days = self.end - self.start
        self.age_coef = {
            "inpatient_mortality": 0.022,
            "long_admission": 0.008,
            "icu_transfer": 0.006,
            "readmission_30d": 0.008,
            "abnormal_hba1c": 0.010,
        }
        # start each link a typical effect-sum below its naive logit so the
        # first calibration pass is not swamped by saturated links
        typical_effect = 2.5
        prev = config.target_prevalences
        self.intercepts = {
            "admission": _logit(
                min(
                    _ADMISSIONS_PER_PATIENT
                    / max(config.visit_rate * 1.3 * self.span_days / 365.25, 1e-9),
                    0.5,
                )
            )
            - 1.5,
            "inpatient_mortality": _logit(prev["inpatient_mortality"]) - typical_effect,
            "long_admission": _logit(prev["long_admission"]) - typical_effect,
            "icu_transfer": _logit(prev["icu_transfer"]) - typical_effect,
            "readmission_30d": _logit(prev["readmission_30d"]) - typical_effect,
            "hba1c_value": 5.2,
        }
        self._calibrate()

    # ---- effect sums -----------------------------------------------------

    def stage_effect(self, task, state, age_years):
        stages, dwell = state.stages, state.dwell
        total = 0.0
        for m in self.modules:
            s = stages[m.id]
            if 0 <= s <= 2:
                total += m.effects[task] * _STAGE_WEIGHT[s]
        for a, b, gamma in self.interactions[task]:
            if stages[a] >= 1 and stages[b] >= 1 and stages[a] <= 2 and stages[b] <= 2:
                total += gamma
        for mid, gamma in self.dwell_terms[task]:
            if dwell[mid] >= _DWELL_THRESHOLD:
                total += gamma
        total += self.age_coef[task] * (age_years - 55.0)
        return total

    def admission_effect(self, stages):
        total = 0.0
        for m in self.modules:
            s = stages[m.id]
            if 0 <= s <= 2:
                total += m.admission_effect * _STAGE_WEIGHT[s]
        return total

    def admission_logit(self, stages):
        return self.intercepts["admission"] + self.admission_effect(stages)

    def visit_rate_now(self, stages):
        rate = self.config.visit_rate
        for m in self.modules:
            if 0 <= stages[m.id] <= 2:
                rate *= m.visit_multiplier
        return min(rate, 5.0 * self.config.visit_rate)

    # ---- calibration -----------------------------------------------------

    def _calibrate(self, shadow_schedule=(1000, 1000, 1800, 3000)):
        """Fix link intercepts so realized prevalences match the targets.

        Each pass simulates shadow patients (state machinery only, no code
        emission), collects per-event effect sums, and solves every intercept
        by bisection on the mean link value. Multiple passes are needed
        because the intercepts feed back into the event pools: the admission
        rate selects who gets admitted, deaths truncate records, prior
        positives disqualify hba1c events, and forced readmissions add
        admissions.
        """
        targets = self.config.target_prevalences
        passes = len(shadow_schedule)
        for pass_idx, shadow_patients in enumerate(shadow_schedule):
            stats = _ShadowStats()
            for i in range(shadow_patients):
                rng = substream(self.config.seed, "calibrate", pass_idx, i)
                _simulate_patient(self, f"shadow{i}", rng, emit_codes=False, shadow=stats)
            for task in ("inpatient_mortality", "long_admission"):
                self.intercepts[task] = _solve_intercept(
                    stats.effect_sums[task], targets[task], task
                )
            self.intercepts["icu_transfer"] = _solve_intercept(
                stats.effect_sums["icu_transfer"], targets["icu_transfer"], "icu_transfer"
            )
            last = pass_idx == passes - 1
            q = stats.spontaneous_readmit_rate()
            resid = (targets["readmission_30d"] - q) / max(1.0 - q, 1e-9)
            if resid <= 0:
                if last:
                    raise DataError(
                        "infeasible prevalence for readmission_30d: spontaneous "
                        f"readmissions alone reach {q:.3f}"
                    )
                resid = 0.01
            self.intercepts["readmission_30d"] = _solve_intercept(
                stats.effect_sums["readmission_30d"], resid, "readmission_30d"
            )
            self.intercepts["hba1c_value"] = _solve_hba1c_intercept(
                stats.hba1c_events, targets["abnormal_hba1c"]
            )
            # per-visit admission logits: solve so expected spontaneous
            # admissions plus observed forced ones hit the per-patient target
            spont_target = (
                _ADMISSIONS_PER_PATIENT - stats.forced_admissions / shadow_patients
            )
            if spont_target <= 0:
                if last:
                    raise DataError(
                        "infeasible admission rate: forced readmissions dominate"
                    )
                spont_target = 0.1
            eff = np.asarray(stats.visit_adm_effects)
            per_visit_target = spont_target * shadow_patients / max(len(eff), 1)
            self.intercepts["admission"] = _solve_intercept(
                eff, min(per_visit_target, 0.9), "admission"
            )


class _ShadowStats:
    def __init__(self):
        self.effect_sums = {task: [] for task in TASKS}
        self.hba1c_events = []  # (diabetic_before, value_effect)
        self.discharges = 0
        self.spontaneous_readmits = 0
        self.visit_adm_effects = []
        self.forced_admissions = 0

    def spontaneous_readmit_rate(self):
        return self.spontaneous_readmits / max(self.discharges, 1)


class _PatientState:
    """Latent disease state: current stage and final-stage dwell per module."""

    __slots__ = ("stages", "dwell")

    def __init__(self, module_ids):
        self.stages = {mid: _NEVER for mid in module_ids}
        self.dwell = {mid: 0 for mid in module_ids}

    def note_visit(self):
        for mid, s in self.stages.items():
            if s == 2:
                self.dwell[mid] += 1


def _logit(p):
    return math.log(p / (1.0 - p))


def _solve_intercept(effect_sums, target, task, lo=-25.0, hi=10.0):
    arr = np.asarray(effect_sums, dtype=np.float64)
    if arr.size == 0:
        raise DataError(f"infeasible prevalence for {task}: no events in calibration")

    def mean_link(c):
        return float(np.mean(1.0 / (1.0 + np.exp(-(c + arr)))))

    if mean_link(hi) < target or mean_link(lo) > target:
        raise DataError(f"infeasible prevalence for {task}: link saturates before {target}")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mean_link(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _solve_hba1c_intercept(events, target, lo=0.0, hi=8.0):
    if not events:
        raise DataError("infeasible prevalence for abnormal_hba1c: no labs in calibration")
    from scipy.special import ndtr

    diab = np.array([e[0] for e in events], dtype=bool)
    eff = np.array([e[1] for e in events])

    def mean_pos(c):
        z = (6.5 - (c + eff)) / _HBA1C_VALUE_SD
        p = ndtr(-z)
        p[diab] = 0.0
        return float(np.mean(p))

    if mean_pos(hi) < target:
        raise DataError(
            f"infeasible prevalence for abnormal_hba1c: link saturates before {target}"
        )
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mean_pos(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _transition_stages(model, stages, gap_years, rng):
    for m in model.modules:
        s = stages[m.id]
        if s == _NEVER:
            if rng.random() < 1.0 - math.exp(-m.onset_hazard * gap_years):
                stages[m.id] = 0
        elif s in (0, 1):
            if rng.random() < 1.0 - math.exp(-m.advance_rate * gap_years):
                stages[m.id] = s + 1
            elif rng.random() < 1.0 - math.exp(-0.08 * gap_years):
                stages[m.id] = _REMITTED
        elif s == 2:
            if rng.random() < 1.0 - math.exp(-m.remit_rate * gap_years):
                stages[m.id] = _REMITTED


def _emit_visit_codes(model, stages, rng):
    codes = set()
    for m in model.modules:
        s = stages[m.id]
        if not 0 <= s <= 2:
            continue
        pool = m.stage_codes[s]
        took = False
        # the first code of each stage pool is its hallmark: emitted on most
        # visits, so single-code evidence of the stage exists
        for k, code in enumerate(pool):
            if rng.random() < (0.85 if k == 0 else 0.3):
                codes.add(code)
                took = True
        if not took:
            codes.add(pool[int(rng.integers(len(pool)))])
    n_bg = 1 + int(rng.poisson(0.8))
    for _ in range(n_bg):
        codes.add(model.background_pool[int(rng.integers(len(model.background_pool)))])
    # occasionally record an internal ontology code directly, like real data
    swapped = set()
    for code in codes:
        if rng.random() < 0.08 and code in model.ontology.parent:
            parent = model.ontology.parent[code]
            if not model.ontology.is_root(parent):
                swapped.add(parent)
                continue
        swapped.add(code)
    return swapped


def _simulate_admission(model, pid, state, age_years, admit_ord, prior_diabetic,
                        rng, emit_codes, shadow, latents, day_codes):
    """One inpatient stay. Returns (EncounterMeta, died, new_diabetic_flag)."""
    stages = state.stages
    e = {task: model.stage_effect(task, state, age_years) for task in TASKS}
    if shadow is not None:
        for task in ("inpatient_mortality", "long_admission", "readmission_30d"):
            shadow.effect_sums[task].append(e[task])
    mort_p = _sigmoid(model.intercepts["inpatient_mortality"] + e["inpatient_mortality"])
    long_p = _sigmoid(model.intercepts["long_admission"] + e["long_admission"])
    readmit_p = _sigmoid(model.intercepts["readmission_30d"] + e["readmission_30d"])

    died = rng.random() < mort_p
    long_stay = rng.random() < long_p
    if long_stay:
        los = 7 + min(int(rng.geometric(0.30)) - 1, _LOS_CAP - 7)
    else:
        los = int(rng.integers(1, 7))
    discharge_ord = admit_ord + los

    # daily acuity random walk drives ICU transfer and deterioration markers
    base_acuity = 0.6 * e["icu_transfer"] - 0.9
    acuity = base_acuity + rng.normal(0.0, 0.6)
    icu_offsets = set()
    icu_left = 0
    admit_day = date.fromordinal(admit_ord)
    for offset in range(los):
        day_ord = admit_ord + offset
        in_icu = offset in icu_offsets
        if not in_icu:
            hazard = _sigmoid(model.intercepts["icu_transfer"] + acuity)
            if shadow is not None:
                shadow.effect_sums["icu_transfer"].append(acuity)
            if latents is not None:
                latents.record(pid, date.fromordinal(day_ord), "icu_transfer", hazard)
            if rng.random() < hazard:
                icu_left = 1 + int(rng.geometric(0.5))
        if emit_codes and 1 <= offset <= _INPATIENT_EMIT_CAP:
            emitted = set()
            p_marker = 0.75 * _sigmoid(1.8 * (acuity - 0.2))
            for marker in model.markers[:2]:
                if rng.random() < p_marker:
                    emitted.add(marker)
            if rng.random() < p_marker * 0.7:
                emitted.add(model.markers[2 + int(rng.integers(len(model.markers) - 2))])
            if rng.random() < 0.4:
                active = [m for m in model.modules if 0 <= stages[m.id] <= 2]
                if active:
                    m = active[int(rng.integers(len(active)))]
                    pool = m.stage_codes[stages[m.id]]
                    emitted.add(pool[int(rng.integers(len(pool)))])
            if rng.random() < 0.3:
                emitted.add(
                    model.background_pool[int(rng.integers(len(model.background_pool)))]
                )
            if emitted:
                day_codes.setdefault(day_ord, set()).update(emitted)
        if icu_left > 0 and offset + 1 <= los:
            icu_offsets.add(offset + 1)
            icu_left -= 1
        acuity = 0.75 * acuity + 0.25 * base_acuity + rng.normal(0.0, 0.5)

    # hba1c ordered at admission, value returns later
    labs = ()
    diabetic_now = prior_diabetic
    order_p = 0.42 + 0.35 * _sigmoid(e["abnormal_hba1c"] - 1.2)
    if rng.random() < order_p:
        value_effect = 0.55 * e["abnormal_hba1c"]
        value = model.intercepts["hba1c_value"] + value_effect + rng.normal(0.0, _HBA1C_VALUE_SD)
        labs = ((admit_day, HBA1C_TEST_NAME, round(float(value), 2)),)
        if shadow is not None:
            shadow.hba1c_events.append((prior_diabetic, value_effect))
        if latents is not None:
            if prior_diabetic:
                prob = 0.0
            else:
                z = (6.5 - (model.intercepts["hba1c_value"] + value_effect)) / _HBA1C_VALUE_SD
                prob = _norm_sf(z)
            latents.record(pid, admit_day, "abnormal_hba1c", prob)
        if value > 6.5:
            diabetic_now = True
        if emit_codes:
            day_codes.setdefault(admit_ord, set()).add(model.hba1c_code)

    if latents is not None:
        latents.record(pid, admit_day, "inpatient_mortality", mort_p)
        latents.record(pid, admit_day, "long_admission", long_p)
        # oracle for readmission folds in the spontaneous admission hazard
        adm_rate = model.visit_rate_now(stages) * _sigmoid(model.admission_logit(stages))
        q_spont = 1.0 - math.exp(-adm_rate * 30.0 / 365.25)
        latents.record(
            pid,
            date.fromordinal(discharge_ord),
            "readmission_30d",
            readmit_p + (1.0 - readmit_p) * q_spont,
        )

    planned_readmit = None
    if not died and rng.random() < readmit_p:
        planned_readmit = discharge_ord + int(rng.integers(1, 31))

    enc = EncounterMeta(
        admit=admit_day,
        discharge=date.fromordinal(discharge_ord),
        died_inpatient=died,
        icu_days=frozenset(date.fromordinal(admit_ord + o) for o in sorted(icu_offsets)),
        lab_results=labs,
        diabetic_before=prior_diabetic,
    )
    return enc, died, diabetic_now, planned_readmit


def _simulate_patient(model, pid, rng, emit_codes=True, shadow=None, latents=None):
    age_at_start = float(rng.uniform(25.0, 85.0))
    birth_ord = model.start - int(age_at_start * 365.25)
    gender = "gender_F" if rng.random() < 0.5 else "gender_M"
    race = f"race_r{int(rng.integers(4))}"
    ethnicity = f"ethnicity_e{int(rng.integers(2))}"

    state = _PatientState([m.id for m in model.modules])
    stages = state.stages
    for m in model.modules:
        p_prevalent = 1.0 - math.exp(-m.onset_hazard * 6.0)
        if rng.random() < p_prevalent:
            stages[m.id] = int(rng.integers(0, 2))

    day_codes = {}
    encounters = []
    planned_readmit = None
    prior_diabetic = False
    t = model.start
    last_admission_end = None
    while True:
        rate = model.visit_rate_now(stages)
        gap = max(1, int(round(float(rng.exponential(365.25 / rate)))))
        forced = False
        if planned_readmit is not None and planned_readmit <= t + gap:
            next_t = max(planned_readmit, t + 1)
            forced = True
        else:
            next_t = t + gap
        if next_t >= model.end:
            break
        gap_years = (next_t - t) / 365.25
        _transition_stages(model, stages, gap_years, rng)
        state.note_visit()
        t = next_t
        if forced:
            planned_readmit = None

        if emit_codes:
            day_codes.setdefault(t, set()).update(_emit_visit_codes(model, stages, rng))

        admit_ok = t <= model.end - _ADMISSION_HEADROOM_DAYS
        if shadow is not None and admit_ok:
            if forced:
                shadow.forced_admissions += 1
            else:
                shadow.visit_adm_effects.append(model.admission_effect(stages))
        is_admission = forced or (rng.random() < _sigmoid(model.admission_logit(stages)))
        if is_admission and admit_ok:
            if shadow is not None:
                if last_admission_end is not None and not forced:
                    if 0 < t - last_admission_end <= 30:
                        shadow.spontaneous_readmits += 1
            age_years = (t - birth_ord) / 365.25
            enc, died, prior_diabetic, planned = _simulate_admission(
                model, pid, state, age_years, t, prior_diabetic,
                rng, emit_codes, shadow, latents, day_codes,
            )
            encounters.append(enc)
            if shadow is not None:
                shadow.discharges += 1
            last_admission_end = enc.discharge.toordinal()
            if planned is not None:
                planned_readmit = planned
            if died:
                break
            t = enc.discharge.toordinal()
        elif is_admission and not admit_ok:
            planned_readmit = None

    if shadow is not None:
        return None
    days = tuple(
        DayRecord(date.fromordinal(o), frozenset(codes))
        for o, codes in sorted(day_codes.items())
        if codes
    )
    return PatientTimeline(
        patient_id=pid,
        birth_date=date.fromordinal(birth_ord),
        days=days,
        encounters=tuple(encounters),
        demographics=(gender, race, ethnicity),
    )


def generate_cohort(config: CohortConfig, with_latents: bool = False):
    """Generate (corpus, ontology), optionally plus the latent link oracle.

    Deterministic: the same config yields byte-identical serialized output.
    """
    model = _CohortModel(config)
    latents = _Latents() if with_latents else None
    width = len(str(config.num_patients - 1))
    corpus = []
    for i in range(config.num_patients):
        pid = f"p{i:0{width}d}"
        rng = substream(config.seed, "patient", i)
        corpus.append(_simulate_patient(model, pid, rng, latents=latents))
    log.info(
        "generated %d patients, %d total days, %d encounters",
        len(corpus),
        sum(len(p.days) for p in corpus),
        sum(len(p.encounters) for p in corpus),
    )
    if with_latents:
        return corpus, model.ontology, latents.probs
    return corpus, model.ontology
