"""Constants for pyautobid."""

import hashlib
from typing import TypeAlias

# frozen state roster, shared by datasets and every model checkpoint
STATE_FEATURES: tuple[str, ...] = (
    "time_left",
    "budget_left",
    "budget_consumption_speed",
    "current_cpa_ratio",
    "cumulative_conversions",
    "cumulative_cost",
    "last_action",
    "mean_impression_value",
    "impression_count_forecast",
    "win_rate_recent",
    "last_step_reward",
    "last_step_cost",
    "mean_win_cost_recent",
    "mean_market_price_recent",
    "rolling_win_rate",
    "rolling_cpa_ratio",
)
STATE_DIM = len(STATE_FEATURES)
ROSTER_HASH = hashlib.sha256(",".join(STATE_FEATURES).encode()).hexdigest()[:16]

TRAJ_FORMAT = "traj-v1"
TRAJ_MAGIC = b"TRJ1"
CKPT_FORMAT = "ckpt-v1"
PROMPT_VERSION = "prompt-v1"
SFT_SCHEMA = "gqpo-sft-v1"
COT_FORMAT = "cot-v1"

NUM_STEPS = 48
ROLLING_WINDOW = 3
SENTINEL_CPA_RATIO = 10.0
EPS_DIV = 1e-9

# recommended downstream fine-tune settings carried in the SFT header
SFT_RECOMMENDED = {"batch_size": 64, "learning_rate": 1e-6, "epochs": 5}

BUDGET_RATIOS = (0.5, 0.75, 1.0, 1.25, 1.5)
RTG_WEIGHTS = (0.0, 0.1, 0.2, 0.5, 1.0)
INSTRUCTION_OVERRIDES = ("INCREASE", "DECREASE", "base", "none")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_BACKEND = 4

JSONValue: TypeAlias = "dict[str, JSONValue] | list[JSONValue] | str | int | float | bool | None"
