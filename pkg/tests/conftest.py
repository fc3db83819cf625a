"""Shared fixtures: random vocabularies and trajectories for property tests."""

import numpy as np
import pytest

from trajehr.cohort import PatientTrajectory, Visit
from trajehr.ontology import N_CHAPTERS, Code, CodeType, Vocabulary


def random_vocab(rng, n_diag=30, n_med=8, n_lab=8, n_proc=6) -> Vocabulary:
    codes = [Code(f"D{i:03d}", CodeType.DIAGNOSIS) for i in range(n_diag)]
    chapter_map = {c.identifier: int(rng.integers(1, N_CHAPTERS + 1)) for c in codes}
    codes += [Code(f"M{i:03d}", CodeType.MEDICATION) for i in range(n_med)]
    codes += [Code(f"L{i:03d}", CodeType.LAB) for i in range(n_lab)]
    codes += [Code(f"P{i:03d}", CodeType.PROCEDURE) for i in range(n_proc)]
    return Vocabulary(codes=codes, chapter_map=chapter_map)


def random_trajectory(rng, vocab, max_visits=5, max_codes_per_visit=8, patient_id="p") -> PatientTrajectory:
    n_visits = int(rng.integers(1, max_visits + 1))
    age = float(rng.uniform(20, 70))
    visits = []
    all_codes = list(vocab.codes)
    for _ in range(n_visits):
        n = int(rng.integers(1, max_codes_per_visit + 1))
        picks = [all_codes[int(rng.integers(len(all_codes)))] for _ in range(n)]
        visits.append(Visit(codes=picks, age_years=round(age, 3)))
        age += float(rng.uniform(0.1, 2.0))
    return PatientTrajectory(patient_id=patient_id, visits=visits)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def vocab(rng):
    return random_vocab(rng)
