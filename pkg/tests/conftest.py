"""Shared fixtures. The default cohort is expensive, so it is built once per
session and reused by the generator property tests and the acceptance suite."""

import pytest

from clmbench.synth import CohortConfig, generate_cohort

DEFAULT_SEED = 20260808


@pytest.fixture(scope="session")
def default_cohort():
    config = CohortConfig(seed=DEFAULT_SEED)
    corpus, ontology, latents = generate_cohort(config, with_latents=True)
    return {"config": config, "corpus": corpus, "ontology": ontology, "latents": latents}


@pytest.fixture(scope="session")
def small_cohort():
    config = CohortConfig(num_patients=600, seed=99)
    corpus, ontology = generate_cohort(config)
    return {"config": config, "corpus": corpus, "ontology": ontology}
