"""Patient trajectories: data model, JSONL IO, age binning, synthetic generator.

The generator stands in for restricted clinical data. It plants recoverable
structure on purpose: a latent per-patient chapter state follows a first-order
Markov walk (temporal signal for the progression graph), comorbid code pairs
co-occur within chapters (aggregation signal for chapter tokens), and label
slots are deterministic functions of the trajectory plus a held-out next visit
for the phenotyping task.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, NegativeAge, ParseError, UnknownCode, ValidationError
from .ontology import (
    N_CHAPTERS,
    Code,
    CodeType,
    Vocabulary,
    chapter_of,
)

AGE_CLAMP = 90.0
N_AGE_BINS = 20
_BIN_WIDTH = AGE_CLAMP / N_AGE_BINS

TASKS = ("mortality", "plos", "readmission", "phenotyping")


def age_bin(age_years: float) -> int:
    """Discretize age into one of 20 even bins over [0, 90]; ages > 90 clamp to 90."""
    if age_years < 0:
        raise NegativeAge(f"age must be nonnegative, got {age_years}")
    clamped = min(float(age_years), AGE_CLAMP)
    return min(int(clamped // _BIN_WIDTH), N_AGE_BINS - 1)


@dataclass
class Visit:
    codes: list[Code]
    age_years: float

    def __post_init__(self):
        if not self.codes:
            raise ValidationError("a visit must contain at least one code")
        if self.age_years < 0:
            raise NegativeAge(f"visit age must be nonnegative, got {self.age_years}")

    def distinct_identifiers(self) -> set[str]:
        return {c.identifier for c in self.codes}


@dataclass
class PatientTrajectory:
    patient_id: str
    visits: list[Visit]
    labels: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.visits) < 1:
            raise ValidationError(f"patient {self.patient_id}: needs at least one visit")
        ages = [v.age_years for v in self.visits]
        if any(b < a for a, b in zip(ages, ages[1:])):
            raise ValidationError(f"patient {self.patient_id}: visit ages must be nondecreasing")

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    def total_codes(self) -> int:
        return sum(len(v.codes) for v in self.visits)


# ---------------------------------------------------------------------------
# JSONL cohort files


def _code_from_json(obj, vocab: Vocabulary, patient_id: str, visit_idx: int) -> Code:
    ident = obj["id"]
    if ident not in vocab:
        raise UnknownCode(f"patient {patient_id} visit {visit_idx}: code {ident!r} not in vocabulary")
    code = vocab.get(ident)
    if code.code_type.value != obj["type"]:
        raise ValidationError(
            f"patient {patient_id} visit {visit_idx}: code {ident!r} declared type "
            f"{obj['type']!r} but vocabulary says {code.code_type.value!r}"
        )
    return code


def read_cohort(path, vocab: Vocabulary) -> list[PatientTrajectory]:
    """Read a JSON-lines cohort file, validating every code against the vocabulary."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            try:
                pid = obj["patient_id"]
                visits = [
                    Visit(
                        codes=[_code_from_json(c, vocab, pid, t) for c in v["codes"]],
                        age_years=float(v["age"]),
                    )
                    for t, v in enumerate(obj["visits"], start=1)
                ]
                labels = obj.get("labels", {})
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: missing field {exc}") from exc
            out.append(PatientTrajectory(patient_id=pid, visits=visits, labels=labels))
    return out


def write_cohort(cohort: list[PatientTrajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in cohort:
            obj = {
                "patient_id": traj.patient_id,
                "visits": [
                    {
                        "age": v.age_years,
                        "codes": [{"id": c.identifier, "type": c.code_type.value} for c in v.codes],
                    }
                    for v in traj.visits
                ],
                "labels": traj.labels,
            }
            fh.write(json.dumps(obj, separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic generator


def cyclic_transition(n: int, p_advance: float, p_retreat: float, p_stay: float) -> list[list[float]]:
    """Row-stochastic walk on a cycle of n states; leftover mass spreads uniformly."""
    if n == 1:
        return [[1.0]]
    rest = 1.0 - (p_advance + p_retreat + p_stay)
    if rest < -1e-12:
        raise InvalidSpec("cyclic transition probabilities exceed 1")
    others = max(rest, 0.0) / (n - 1) if n > 1 else 0.0
    mat = []
    for i in range(n):
        row = [others] * n
        row[i] = p_stay
        row[(i + 1) % n] = row[(i + 1) % n] + p_advance
        row[(i - 1) % n] = row[(i - 1) % n] + p_retreat
        total = sum(row)
        mat.append([x / total for x in row])
    return mat


@dataclass
class GeneratorSpec:
    """Everything the synthetic generator needs; README documents the JSON schema."""

    n_patients: int = 1000
    visit_count_probs: list[float] = field(default_factory=lambda: [0.0, 0.15, 0.30, 0.30, 0.25])
    codes_per_visit: dict[str, float] = field(
        default_factory=lambda: {"diagnosis": 4.0, "medication": 2.0, "lab": 2.0, "procedure": 1.0}
    )
    chapters: list[int] = field(default_factory=lambda: [1, 3, 5, 7, 8, 9])
    transition: list[list[float]] | None = None
    diagnosis_codes_per_chapter: int = 10
    n_medication: int = 20
    n_lab: int = 30
    n_procedure: int = 15
    comorbidity_strength: float = 0.3
    noise_rate: float = 0.03
    base_age_range: tuple[float, float] = (25.0, 80.0)
    visit_gap_years: tuple[float, float] = (0.2, 1.5)
    label_rules: dict = field(
        default_factory=lambda: {
            "mortality": {"chapter_weights": {"7": 1.0, "8": 1.0}, "default_weight": -0.4, "bias": -0.1},
            "plos": {"min_codes": 10},
            "readmission": {"min_visits": 4},
        }
    )

    def __post_init__(self):
        if self.transition is None:
            # bidirectional walk: the visited-chapter SET underdetermines the last
            # state, so visit order carries real signal that a bag of codes cannot
            self.transition = cyclic_transition(len(self.chapters), 0.45, 0.45, 0.10)
        self.validate()

    def validate(self) -> None:
        if self.n_patients < 1:
            raise InvalidSpec("n_patients must be >= 1")
        probs = self.visit_count_probs
        if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise InvalidSpec("visit_count_probs must be nonnegative and sum to 1")
        if set(self.codes_per_visit) != {"diagnosis", "medication", "lab", "procedure"}:
            raise InvalidSpec("codes_per_visit needs the four type keys")
        if self.codes_per_visit["diagnosis"] < 1:
            raise InvalidSpec("mean diagnoses per visit must be >= 1 (zero codes per visit is invalid)")
        if any(m < 0 for m in self.codes_per_visit.values()):
            raise InvalidSpec("codes_per_visit means must be nonnegative")
        if not self.chapters or len(set(self.chapters)) != len(self.chapters):
            raise InvalidSpec("chapters must be a nonempty list of distinct chapter ids")
        if any(not (1 <= j <= N_CHAPTERS) for j in self.chapters):
            raise InvalidSpec(f"chapter ids must lie in 1..{N_CHAPTERS}")
        n = len(self.chapters)
        if len(self.transition) != n or any(len(row) != n for row in self.transition):
            raise InvalidSpec(f"transition must be a {n}x{n} matrix over the active chapters")
        for i, row in enumerate(self.transition):
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise InvalidSpec(f"transition row {i} is not stochastic (nonnegative, sum 1)")
        if self.diagnosis_codes_per_chapter < 1:
            raise InvalidSpec("diagnosis_codes_per_chapter must be >= 1")
        if not (0.0 <= self.comorbidity_strength <= 1.0 and 0.0 <= self.noise_rate <= 1.0):
            raise InvalidSpec("comorbidity_strength and noise_rate must lie in [0, 1]")
        lo, hi = self.base_age_range
        if lo < 0 or hi < lo:
            raise InvalidSpec("base_age_range must satisfy 0 <= lo <= hi")
        glo, ghi = self.visit_gap_years
        if glo < 0 or ghi < glo:
            raise InvalidSpec("visit_gap_years must satisfy 0 <= lo <= hi")

    @classmethod
    def from_json(cls, path) -> "GeneratorSpec":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise InvalidSpec(f"unknown generator spec keys: {sorted(unknown)}")
        if "base_age_range" in raw:
            raw["base_age_range"] = tuple(raw["base_age_range"])
        if "visit_gap_years" in raw:
            raw["visit_gap_years"] = tuple(raw["visit_gap_years"])
        return cls(**raw)

    def to_json(self, path) -> None:
        obj = {k: getattr(self, k) for k in self.__dataclass_fields__}
        obj["base_age_range"] = list(obj["base_age_range"])
        obj["visit_gap_years"] = list(obj["visit_gap_years"])
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2)
            fh.write("\n")


def build_vocabulary(spec: GeneratorSpec) -> Vocabulary:
    """Synthetic vocabulary matching the generator spec's chapter/type layout."""
    codes: list[Code] = []
    chapter_map: dict[str, int] = {}
    for chapter in spec.chapters:
        for i in range(spec.diagnosis_codes_per_chapter):
            ident = f"D{chapter:02d}.{i:02d}"
            codes.append(Code(ident, CodeType.DIAGNOSIS))
            chapter_map[ident] = chapter
    codes.extend(Code(f"M{i:03d}", CodeType.MEDICATION) for i in range(spec.n_medication))
    codes.extend(Code(f"L{i:03d}", CodeType.LAB) for i in range(spec.n_lab))
    codes.extend(Code(f"PR{i:03d}", CodeType.PROCEDURE) for i in range(spec.n_procedure))
    return Vocabulary(codes=codes, chapter_map=chapter_map)


def _chapter_pool(spec: GeneratorSpec, chapter: int) -> list[str]:
    return [f"D{chapter:02d}.{i:02d}" for i in range(spec.diagnosis_codes_per_chapter)]


def _draw_diagnoses(spec: GeneratorSpec, state_idx: int, rng: np.random.Generator) -> list[str]:
    """Diagnosis identifiers for one visit; count is 1 + Poisson(mean - 1) exactly."""
    n_target = 1 + int(rng.poisson(spec.codes_per_visit["diagnosis"] - 1.0))
    picks: list[str] = []
    n_states = len(spec.chapters)
    while len(picks) < n_target:
        if n_states > 1 and rng.random() < spec.noise_rate:
            other = int(rng.integers(n_states - 1))
            idx = other if other < state_idx else other + 1
        else:
            idx = state_idx
        pool = _chapter_pool(spec, spec.chapters[idx])
        i = int(rng.integers(len(pool)))
        picks.append(pool[i])
        # Planted comorbidity: pulling a code sometimes drags in its pair mate.
        if len(picks) < n_target and rng.random() < spec.comorbidity_strength:
            picks.append(pool[min(i ^ 1, len(pool) - 1)])
    return picks


def _simulate_visit_codes(spec: GeneratorSpec, state_idx: int, rng: np.random.Generator) -> list[Code]:
    codes = [Code(ident, CodeType.DIAGNOSIS) for ident in _draw_diagnoses(spec, state_idx, rng)]
    for key, ctype, n_avail, prefix in (
        ("medication", CodeType.MEDICATION, spec.n_medication, "M{:03d}"),
        ("lab", CodeType.LAB, spec.n_lab, "L{:03d}"),
        ("procedure", CodeType.PROCEDURE, spec.n_procedure, "PR{:03d}"),
    ):
        mean = spec.codes_per_visit[key]
        if n_avail == 0 or mean == 0:
            continue
        count = int(rng.poisson(mean))
        for _ in range(count):
            codes.append(Code(prefix.format(int(rng.integers(n_avail))), ctype))
    return codes


def rule_labels(traj: PatientTrajectory, spec: GeneratorSpec, vocab: Vocabulary) -> dict[str, int]:
    """Deterministic label rules recomputable from the trajectory alone."""
    rules = spec.label_rules
    final = traj.visits[-1]
    out: dict[str, int] = {}
    if "mortality" in rules:
        rule = rules["mortality"]
        weights = {int(k): float(v) for k, v in rule.get("chapter_weights", {}).items()}
        default = float(rule.get("default_weight", 0.0))
        chapters = {
            chapter_of(vocab, c) for c in final.codes if c.code_type is CodeType.DIAGNOSIS
        }
        score = float(rule.get("bias", 0.0)) + sum(weights.get(j, default) for j in chapters)
        out["mortality"] = int(score > 0)
    if "plos" in rules:
        out["plos"] = int(len(final.codes) >= int(rules["plos"].get("min_codes", 10)))
    if "readmission" in rules:
        out["readmission"] = int(traj.n_visits >= int(rules["readmission"].get("min_visits", 3)))
    return out


def _generate_patient(spec: GeneratorSpec, seed: int, index: int, vocab: Vocabulary) -> PatientTrajectory:
    rng = np.random.default_rng([seed, index])
    n_visits = 1 + int(rng.choice(len(spec.visit_count_probs), p=spec.visit_count_probs))
    base_age = float(rng.uniform(*spec.base_age_range))
    n_states = len(spec.chapters)

    state = int(rng.integers(n_states))
    visits = []
    age = base_age
    for t in range(n_visits):
        if t > 0:
            age += float(rng.uniform(*spec.visit_gap_years))
            state = int(rng.choice(n_states, p=spec.transition[state]))
        visits.append(Visit(codes=_simulate_visit_codes(spec, state, rng), age_years=round(age, 3)))

    # Held-out next visit: drives the phenotyping label, then is discarded.
    next_state = int(rng.choice(n_states, p=spec.transition[state]))
    next_codes = _draw_diagnoses(spec, next_state, rng)
    phenotype = [0] * N_CHAPTERS
    for ident in set(next_codes):
        phenotype[vocab.chapter_map[ident] - 1] = 1

    traj = PatientTrajectory(patient_id=f"P{index:05d}", visits=visits, labels={})
    traj.labels = dict(rule_labels(traj, spec, vocab))
    traj.labels["phenotyping"] = phenotype
    return traj


def _generate_range(args) -> list[PatientTrajectory]:
    spec, seed, start, stop = args
    vocab = build_vocabulary(spec)
    return [_generate_patient(spec, seed, i, vocab) for i in range(start, stop)]


def generate_cohort(spec: GeneratorSpec, seed: int, workers: int = 1) -> list[PatientTrajectory]:
    """Deterministic synthetic cohort; per-patient RNG streams derive from (seed, index).

    Worker count never changes the output: patient i is always generated from
    stream (seed, i) and results are ordered by patient index.
    """
    spec.validate()
    if workers <= 1 or spec.n_patients < 64:
        return _generate_range((spec, seed, 0, spec.n_patients))
    chunk = (spec.n_patients + workers - 1) // workers
    ranges = [
        (spec, seed, start, min(start + chunk, spec.n_patients))
        for start in range(0, spec.n_patients, chunk)
    ]
    out: list[PatientTrajectory] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_generate_range, ranges):
            out.extend(part)
    return out
