import contextlib

import numpy as np
import pytest
import torch

import latentwarp as lw

# ---------------------------------------------------------------------------
# acceptance-criterion recording: each criterion test wraps its body in
# `criterion(...)` so a one-line pass/fail verdict lands in the terminal
# summary regardless of output capturing.

CRITERION_RESULTS = []


@contextlib.contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        CRITERION_RESULTS.append((number, description, False))
        print(f"[criterion {number:2d}] {description}: FAIL")
        raise
    else:
        CRITERION_RESULTS.append((number, description, True))
        print(f"[criterion {number:2d}] {description}: PASS")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, description, ok in sorted(CRITERION_RESULTS):
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"[criterion {number:2d}] {description}: {verdict}")


@pytest.fixture(scope="session")
def model_cfg():
    return lw.ModelConfig()


@pytest.fixture(scope="session")
def train_cfg():
    return lw.TrainConfig()


@pytest.fixture(scope="session")
def mapping(model_cfg):
    return lw.MappingNetwork(model_cfg.z_dim, model_cfg.latent_dim,
                             model_cfg.latent_layers, seed=model_cfg.seed)


@pytest.fixture(scope="session")
def generator(model_cfg):
    return lw.ProceduralGenerator(model_cfg)


@pytest.fixture(scope="session")
def discriminator(model_cfg):
    return lw.Discriminator(model_cfg.image_size, seed=model_cfg.seed)


@pytest.fixture(scope="session")
def base_encoder(generator, mapping, model_cfg):
    # short fit: enough structure for pipeline tests, not full quality
    return lw.train_base_encoder(generator, mapping, model_cfg, steps=120,
                                 seed=model_cfg.seed)


@pytest.fixture(scope="session")
def pipeline(model_cfg, mapping, generator, discriminator, base_encoder):
    return lw.build_pipeline(model_cfg, mapping, generator, discriminator,
                             base_encoder, seed=model_cfg.seed)


@pytest.fixture(scope="session")
def sampler(generator, mapping, train_cfg):
    return lw.SceneSampler(generator, mapping, train_cfg.data)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def sample_codes(mapping, n, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    z = torch.from_numpy(rng.standard_normal((n, mapping.z_dim)).astype(np.float32))
    with torch.no_grad():
        return mapping(z)
