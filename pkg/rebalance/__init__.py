import os
import logging
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, NonNegativeInt, PositiveInt, ValidationError

from rebalance.errors import UsageError

# Load environment variables
load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Settings(BaseModel):
    """Process-wide settings resolved from the environment."""

    seed: NonNegativeInt = 0
    log_level: str = "WARNING"
    jobs: PositiveInt = 1
    out_dir: str = "runs"
    progress: bool = False
    env_seed_set: bool = Field(default=False, exclude=True)


def configure_logging(level: str = "WARNING") -> None:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger("rebalance").setLevel(numeric)


def create_settings(overrides: Optional[dict] = None) -> Settings:
    env_seed = os.environ.get("REBALANCE_SEED")
    try:
        settings = Settings(
            seed=env_seed or 0,
            log_level=os.environ.get("REBALANCE_LOG_LEVEL") or "WARNING",
            jobs=os.environ.get("REBALANCE_JOBS") or 1,
            out_dir=os.environ.get("REBALANCE_OUT") or "runs",
            env_seed_set=bool(env_seed),
        )
    except ValidationError as e:
        problems = "; ".join(f"REBALANCE_{str(err['loc'][0]).upper()}: {err['msg']}" for err in e.errors())
        raise UsageError(f"invalid environment settings: {problems}") from None
    if overrides:
        settings = settings.model_copy(update=overrides)

    configure_logging(settings.log_level)
    return settings
