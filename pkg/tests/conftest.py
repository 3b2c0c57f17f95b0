import numpy as np
import pytest
import torch

from flowgen.data import make_synthetic
from flowgen.kge import KGEConfig, train_kg_embeddings
from flowgen.ukg import build_urban_kg

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_city():
    """9 grid regions, 30 POIs; the scripted toy city for KG tests."""
    return make_synthetic(num_regions=9, num_days=4, seed=3, num_pois=30)


@pytest.fixture(scope="session")
def toy_kg(toy_city):
    kg, _ = build_urban_kg(toy_city.geometries, toy_city.pois, similar_top_k=3)
    return kg


@pytest.fixture(scope="session")
def toy_embeddings(toy_kg):
    embs, losses = train_kg_embeddings(toy_kg, KGEConfig(epochs=60, seed=0))
    return embs


@pytest.fixture(scope="session")
def small_city():
    """Small fast dataset for trainer-level tests."""
    return make_synthetic(num_regions=6, num_days=10, seed=5, num_pois=18)


@pytest.fixture(scope="session")
def small_setup(small_city):
    """(dataset, kg, embeddings) ready for trainer tests."""
    from flowgen.kge import KGEConfig, train_kg_embeddings

    dataset = small_city.dataset()
    kg, _ = build_urban_kg(small_city.geometries, small_city.pois, similar_top_k=2)
    embs, _ = train_kg_embeddings(kg, KGEConfig(epochs=20, seed=1))
    return dataset, kg, embs


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
