"""Shared fixtures for the acceptance suite.

The expensive artifacts (the N=104 synthetic dataset and the trained
reduced-width hybrid model) are built once per session and shared by the
learning, noise-sweep and scale-sweep criteria.
"""

import time

import numpy as np
import pytest

from tfmforge.elasticity import Dataset, ElasticSubstrate, generate_dataset
from tfmforge.evaluate import evaluate_model
from tfmforge.models import build_model
from tfmforge.rng import RngStream
from tfmforge.training import TrainConfig, train

ACCEPT_SEED = 7
ACCEPT_WIDTHS = (16, 32, 64, 128)


@pytest.fixture(scope="session")
def accept_run(tmp_path_factory):
    """Seeded 128/16/16 dataset at N=104 plus a hybrid trained on it.

    Returns a dict with the dataset splits, the untrained-baseline report,
    the trained model, its test report, and the wall-clock cost of the
    generate + train + evaluate pipeline.
    """
    t0 = time.monotonic()
    out = tmp_path_factory.mktemp("accept-ds")
    generate_dataset(out, (128, 16, 16), ElasticSubstrate(), seed=ACCEPT_SEED)
    ds = Dataset(out)
    train_data = ds.load_split("train", np.float32)
    val_data = ds.load_split("val", np.float32)
    test_data = ds.load_split("test", np.float32)

    model = build_model("hybrid", RngStream(ACCEPT_SEED, "init"), n=104,
                        unet_widths=ACCEPT_WIDTHS, hybrid_dim=128,
                        hybrid_layers=2, vit_heads=4, dropout=0.1,
                        dtype=np.float32)
    untrained = evaluate_model(model, test_data[0], test_data[1])
    result = train(model, train_data, val_data,
                   TrainConfig(lr0=1e-3, max_epochs=20, batch_size=8,
                               seed=ACCEPT_SEED))
    trained = evaluate_model(model, test_data[0], test_data[1])
    elapsed = time.monotonic() - t0
    return {
        "dataset": ds,
        "test": test_data,
        "model": model,
        "untrained_report": untrained,
        "trained_report": trained,
        "train_result": result,
        "elapsed_s": elapsed,
    }
