import numpy as np
import pytest

from factlab import factgen, model, trainer


@pytest.fixture(scope="session")
def tiny_schema():
    return factgen.schema_subset(
        factgen.default_schema("compact"),
        ["operator", "start_date", "credit_no", "longitude"],
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_schema):
    return factgen.synth_corpus(tiny_schema, num_keys=40, seed=101)


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return model.ModelConfig(num_layers=2, hidden=32, intermediate=96, heads=4,
                             max_seq_len=160)


@pytest.fixture()
def tiny_state(tiny_model_cfg):
    return model.init_model(tiny_model_cfg, seed=7)


@pytest.fixture(scope="session")
def small_batch(tiny_corpus):
    data = trainer.EncodedDataset.from_facts(tiny_corpus)
    tokens, mask = trainer.make_batch(data.examples[:16])
    return tokens, mask
