import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from segqc.features import extract_features
from segqc.synth import build_dataset

SKEWED_SEED = 11


@pytest.fixture(scope="session")
def skewed_dataset():
    """50-case skewed-good phantom set with extracted features, shared across tests."""
    cases = build_dataset(50, SKEWED_SEED, "skewed-good")
    feats = {c.case_id: extract_features(c.image, c.pred_mask, c.lung_mask) for c in cases}
    return cases, feats


@pytest.fixture(scope="session")
def skewed_train_matrix(skewed_dataset):
    cases, feats = skewed_dataset
    train = [c for c in cases if c.split == "train"]
    test = [c for c in cases if c.split == "test"]
    X = np.array([feats[c.case_id].as_array() for c in train])
    train_dice = [c.true_dice for c in train]
    test_feats = [feats[c.case_id] for c in test]
    test_dice = [c.true_dice for c in test]
    return X, train_dice, test_feats, test_dice
