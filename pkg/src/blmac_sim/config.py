"""Configuration settings for blmac-sim.

This module contains the processor-model settings, loaded from environment
variables using Pydantic, plus the published constants the reports compare against.
"""

from pathlib import Path

from pydantic_settings import BaseSettings


class BlmacSimConfig(BaseSettings):
    """
    Defines all configuration settings for the processor model.
    Settings are loaded from environment variables (case-insensitive).
    Example: set BLMAC_ACC_BITS=24 to widen the accumulators.
    """

    # BLMAC array settings
    BLMAC_ACC_BITS: int = 20
    BLMAC_ARRAY_WIDTH: int = 416
    BLMAC_TILE_WIDTH: int = 13
    BLMAC_EXACT_CHECK: bool = False

    # Memory settings
    BLMAC_CACHE_BYTES: int = 262144
    BLMAC_MEM_BYTES_PER_CYCLE: float = 8.0  # 0 disables slice-load modeling
    BLMAC_WEIGHT_LOAD_BYTES_PER_CYCLE: float = 0.0  # 0 leaves weight-cache loads out of cycle totals

    # Cycle overhead settings (merger, scale unit, pipeline)
    BLMAC_OVERHEAD_FRACTION: float = 0.12
    BLMAC_ROW_OVERHEAD_CYCLES: int = 0
    BLMAC_SLICE_OVERHEAD_CYCLES: int = 0

    # Logging and HTTP front end
    BLMAC_LOG_LEVEL: str = "INFO"
    BLMAC_HOST: str = "0.0.0.0"
    BLMAC_PORT: int = 9096


# --- Application-level constants below ---

# Widths a tile group can take, smallest first (one tile is 13 BLMACs).
DEFAULT_GROUP_WIDTHS = (13, 26, 52, 104, 208, 416)

# Default leaky slope 26/256, close to Darknet's 0.1.
DEFAULT_LEAKY_NUM = 26
DEFAULT_LEAKY_SHIFT = 8

FLOAT_FORMATS = {
    "half": {"exp_bits": 5, "frac_bits": 10, "bias": 15},
    "bfloat16": {"exp_bits": 8, "frac_bits": 7, "bias": 127},
    "tf32": {"exp_bits": 8, "frac_bits": 10, "bias": 127},
    "single": {"exp_bits": 8, "frac_bits": 23, "bias": 127},
}

# Average BLMAC cycles per floating-point multiply/accumulate, as published.
PUBLISHED_FP_CYCLES = {"half": 3.77, "bfloat16": 2.77, "tf32": 3.77, "single": 8.11}

# Published TinyYolo v3 figures at 416x416.
TINYYOLO_OPERATIONS = 5.56e9
PUBLISHED_FRAME_CYCLES = 7909915
PUBLISHED_WEIGHT_CACHE_BYTES = 262144

# Application paths
BASE_DIR = Path(__file__).parent.parent.parent
CONFIG_DIR = BASE_DIR / "configs"
