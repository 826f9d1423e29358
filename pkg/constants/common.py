import os

COVPROP_LOGGER_NAME: str = os.getenv("COVPROP_LOGGER_NAME", "covprop")
COVPROP_LOG_LEVEL: str = os.getenv("COVPROP_LOG_LEVEL", "INFO")
COVPROP_THREADS: int = max(1, int(os.getenv("COVPROP_THREADS", "1")))  # worker cap for per-sample parallelism
MC_BATCH_SIZE: int = int(os.getenv("COVPROP_MC_BATCH", "256"))  # noisy forwards per chunk
APP_TITLE: str = "Covariance-propagation certification service"
APP_PROTOCOL: str = "http"

# Model file container
MODEL_MAGIC: bytes = b"CVPR"
MODEL_FORMAT_VERSION: int = 1

# Certification defaults
DEFAULT_SIGMA: float = float(os.getenv("COVPROP_SIGMA", "0.25"))
DEFAULT_R_MAX: float = float(os.getenv("COVPROP_RMAX", "0.2"))
DEFAULT_ALPHA: float = 0.001
DEFAULT_N0: int = 100
DEFAULT_N: int = 100_000
DEFAULT_SEED: int = 0
DEFAULT_BOX_MULTIPLIER: float = 2.0  # IBP half-width in units of sigma
RADIUS_GRID: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
DENOMINATOR_FLOOR: float = 1e-12
SYMMETRY_TOL: float = 1e-9
PSD_TOL: float = 1e-8
MAX_TRACKED_CHANNELS: int = 512  # memory guard for empirical layer moments
CROSSCHECK_TOLERANCE: float = 0.05  # allowed shortfall of the MC radius, in units of sigma
MIN_LAYER_SAMPLES: int = 100

# Training defaults (desk scale)
DEFAULT_EPOCHS: int = 40
DEFAULT_LAMBDA: float = 0.5
DEFAULT_LAMBDA_EPOCH: int = 20
DEFAULT_GAMMA_MULTIPLIER: float = 8.0  # Gamma = multiplier * sigma
DEFAULT_LEARNING_RATE: float = 0.01
DEFAULT_MOMENTUM: float = 0.9
DEFAULT_BATCH_SIZE: int = 16
FINETUNE_TOP_FRACTION: float = 0.1  # share of samples whose classification loss is dropped

# Toy dataset
TOY_IMAGE_SIZE: int = 8
TOY_CLASS_COUNT: int = 4
TOY_SAMPLE_COUNT: int = 256
TOY_PIXEL_NOISE: float = 0.3

# CLI reports
GAUSSIANITY_SAMPLES: int = 2000  # scatter points exported by `compare`
ABLATION_SEED_COUNT: int = 3
ABLATION_TRAIN_FRACTION: float = 0.75
ABLATION_R_GRID: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4)
ABLATION_NOISE_RATE: float = 0.45

# Toy ablation regime: sigma on the order of the quadrant contrast keeps radii away from the MC cap
TOY_SIGMA: float = 1.0
ABLATION_EPOCHS: int = 20
ABLATION_LAMBDA_EPOCH: int = 5
NOISY_WARMUP_EPOCHS: int = 5
NOISY_FINETUNE_EPOCHS: int = 10
NOISY_TOP_FRACTION: float = 0.25
ABLATION_MC_SAMPLES: int = 2000  # estimation draws per held-out sample when a sweep is MC-scored
