"""
Configuration settings for BurstMamba.

Every default used by the library lives here as a module constant. Values can be
overridden per run through a ``.env`` file or environment variables prefixed
with ``BURSTMAMBA_`` (see the bottom of this file), or through a JSON config
file and flags on the command line.
"""

import os

from dotenv import load_dotenv

load_dotenv()

# Model (toy scale)
CHANNELS = 16
STACKS = 2
STATE_DIM = 8
SCALE = 4
INPUT_MODE = "rgb3"  # rgb3 | rggb1
D_SKIP = True
REDUCTION = 4  # channel attention squeeze ratio (16 at 180 channels)
PSI_DIM = 8
ALIGNMENT = "ofs"  # ofs | ofs_integer | none | prealign
PSI_S6 = True
DT_MIN = 1e-3
DT_MAX = 1e-1
A_CLAMP = -1e-4

# Training (desk schedule)
STAGE1_STEPS = 1000
STAGE2_STEPS = 2000
BATCH_SIZE = 4
BURST_LEN = 8
LEARNING_RATE = 1e-4
WEIGHT_DECAY = 1e-4
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PATCH_STAGE1 = 24  # LR pixels
PATCH_STAGE2 = 16
VAL_EVERY = 50
VAL_SAMPLES = 4
CHECKPOINT_EVERY = 250
LOG_EVERY = 10

# Synthetic data
SHIFT_MAX = 3.0  # HR pixels
NOISE_SIGMA = 0.0
MOSAIC = False
DOWNSAMPLE = "box"  # box | bicubic
DATASET_COUNT = 32
LR_SIZE = (32, 32)
FREQUENCY = 1.0

# Metrics
SSIM_WINDOW = 8
PEAK = 1.0

# Benchmark
BENCH_LENGTHS = (4096, 8192, 16384)
BENCH_REPS = 20
BENCH_CHANNELS = 4

# Runtime
SEED = int(os.getenv("BURSTMAMBA_SEED", "0"))
LOG_LEVEL = os.getenv("BURSTMAMBA_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("BURSTMAMBA_LOG_FILE", "burst_mamba.log")
