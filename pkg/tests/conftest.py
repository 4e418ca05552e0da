import numpy as np
import pytest

from stacksolver import corpus, encoder, trainer


FIG1_TEXT = ("each notebook takes $ 0.5 and each pen takes $ 1 . tom has $ 10 ."
             " how many notebook can he buy after buying 5 pens ?")
FIG1_EQUATION = "x=(10-1*5)/0.5"


@pytest.fixture(scope="session")
def fig1_raw():
    return corpus.RawProblem(id="fig1", text=FIG1_TEXT,
                             equation=FIG1_EQUATION, answer="10")


@pytest.fixture(scope="session")
def fig1_prepared(fig1_raw):
    return corpus.prepare(fig1_raw)


def tiny_train_config(**overrides):
    base = dict(epochs=2, batch_size=4, seed=3, embed_dim=8,
                hidden_per_direction=8, eval_every=1, patience=1000)
    base.update(overrides)
    return trainer.TrainConfig(**base)


@pytest.fixture(scope="session")
def synth_prepared():
    raws = corpus.synth_generate(24, seed=42, difficulty=2)
    prepared, report = corpus.prepare_dataset(raws)
    assert report.total_rejected == 0
    return prepared


def tiny_model(problems, seed=0, **config_overrides):
    config = tiny_train_config(**config_overrides)
    vocab = encoder.build_vocab(p.tokens for p in problems)
    return trainer.build_model(vocab, config, np.random.default_rng(seed)), config


def zeroed(model):
    for name in model.registry.names():
        model.registry[name][...] = 0.0
    return model


@pytest.fixture(scope="session")
def overfit_one(synth_prepared):
    """A model trained to reproduce a single problem's target exactly."""
    problem = synth_prepared[0]
    config = trainer.TrainConfig(
        epochs=400, batch_size=1, seed=5, embed_dim=16, hidden_per_direction=16,
        eval_every=25, patience=10_000, target_accuracy=1.0)
    result = trainer.train([problem], config)
    return result, problem
