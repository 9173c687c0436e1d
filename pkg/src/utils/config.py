"""
Configuration management for the fiber segmentation toolkit
"""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings, overridable through FIBERSEG_* environment variables or .env"""

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "text"
    LOG_DIR: str = ""

    # Reproducibility
    DEFAULT_SEED: int = 42

    # Random forest prediction
    PREDICT_CHUNK: int = 65536

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="FIBERSEG_",
        case_sensitive=True,
        extra="ignore",
    )


# Global settings instance
settings = Settings()
