import numpy as np
import pytest

from otmel.correlation import identity_projections
from otmel.types import EntityRecord, FeatureMatrix, MentionRecord


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_record(rng, kind="mention", rows_text=4, rows_visual=5, d=8, gold=None):
    text = FeatureMatrix(rng.standard_normal((rows_text, d)))
    visual = FeatureMatrix(rng.standard_normal((rows_visual, d)))
    if kind == "mention":
        return MentionRecord(id="m0", text=text, visual=visual, gold_entity=gold)
    return EntityRecord(id="e0", text=text, visual=visual)


@pytest.fixture
def mention(rng):
    return make_record(rng, "mention")


@pytest.fixture
def entity(rng):
    return make_record(rng, "entity")


@pytest.fixture
def identity_table():
    return identity_projections(8)
