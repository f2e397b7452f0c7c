"""
Настройки лаборатории: переменные окружения и логирование
"""
import sys

from decouple import config
from loguru import logger
from pydantic import ValidationError

from errors import ConfigError

# ===== Logging =====
LOG_LEVEL = config("LOG_LEVEL", default="INFO")

# ===== BatchNorm (в статье не указаны, это значения по умолчанию) =====
BN_MOMENTUM = config("FTLAB_BN_MOMENTUM", default=0.1, cast=float)
BN_EPSILON = config("FTLAB_BN_EPSILON", default=1e-5, cast=float)

# ===== Training =====
DEFAULT_EPOCHS = config("FTLAB_EPOCHS", default=40, cast=int)
DEFAULT_BATCH_SIZE = config("FTLAB_BATCH_SIZE", default=16, cast=int)
DEFAULT_WORKERS = config("FTLAB_WORKERS", default=1, cast=int)

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{line} - {message}"


def setup_logging(level: str = LOG_LEVEL) -> None:
    """Логи идут в stderr, stdout остается для машинно-читаемых строк"""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)


def validate_config(model_cls, data, what: str = "config"):
    """Собирает pydantic-модель, ошибки валидации превращаются в ConfigError"""
    if isinstance(data, model_cls):
        return data
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid {what}: {problems}") from e
