"""
Общие фикстуры тестов: маленькие модели, маленькие датасеты, проверка градиентов
"""
import numpy as np
import pytest
from loguru import logger

import nn_kernel as nk
from mininet import ModelConfig, build_model
from synth_data import TaskSpec, generate_splits

TINY_IMAGE = 16


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.remove()
    yield
    logger.remove()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(stages=2, base_channels=4, input_size=TINY_IMAGE, num_classes=7, init_seed=11)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def tiny_task() -> TaskSpec:
    return TaskSpec(image_size=TINY_IMAGE)


@pytest.fixture(scope="session")
def tiny_data(tiny_task):
    """(train 28 сэмплов, test 14 сэмплов)"""
    return generate_splits(tiny_task, 4, 2, seed=3)


def _check_gradient(loss_fn, array, analytic, step=1e-6, indices=None):
    """Относительная ошибка analytic против центральных разностей (по indices или по всему массиву)"""
    numeric = nk.numerical_gradient(loss_fn, array, step=step, indices=indices)
    if indices is None:
        return nk.relative_gradient_error(analytic, numeric)
    picked = tuple(np.array(indices).T)
    return nk.relative_gradient_error(np.asarray(analytic)[picked], numeric[picked])


@pytest.fixture
def grad_check():
    return _check_gradient
