from pydantic import Field
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Reproducibility & outputs
    seed: int = Field(0, alias="SEED")
    out_dir: str = Field("results", alias="OUT_DIR")

    # Sinkhorn
    sinkhorn_tolerance: float = Field(1e-9, alias="SINKHORN_TOLERANCE")
    sinkhorn_max_iterations: int = Field(5000, alias="SINKHORN_MAX_ITERATIONS")
    attention_iterations: int = Field(3, alias="ATTENTION_ITERATIONS")

    # Mean-field experiments
    meanfield_tolerance: float = Field(1e-10, alias="MEANFIELD_TOLERANCE")
    meanfield_max_iterations: int = Field(2000, alias="MEANFIELD_MAX_ITERATIONS")
    block_size: int = Field(512, alias="BLOCK_SIZE")
    divergence_bound: float = Field(1e6, alias="DIVERGENCE_BOUND")

    # Gradient checks
    gradcheck_step: float = Field(1e-6, alias="GRADCHECK_STEP")
    gradcheck_coordinates: int = Field(50, alias="GRADCHECK_COORDINATES")
    gradcheck_tolerance: float = Field(1e-5, alias="GRADCHECK_TOLERANCE")
    gradcheck_floor: float = Field(1e-3, alias="GRADCHECK_FLOOR")

    # Logging
    log_level: str = Field("INFO", alias="LOG_LEVEL")
    log_dir: str = Field("logs", alias="LOG_DIR")

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "extra": "ignore",
    }


settings = Settings()
