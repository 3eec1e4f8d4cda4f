"""
Density-weighted residual alignment laboratory.

Every default of the lab lives here.
"""
# Application name
APP_NAME = "heedlab"

# Density weights
TAU = 0.5
BETA = 2.0

# Cache file layout
CACHE_MAGIC = b"HEEDCACH"
CACHE_VERSION = 1
CACHE_ALIGNMENT = 64
CACHE_LEVELS = 15  # 4-bit codes are 0..15
# Gradient weights share the file format, their ids live in the upper half
GRAD_NAMESPACE = 1 << 63

# Knowledge distillation (stage 3)
LAMBDA_KL = 1.0
LAMBDA_CE = 0.1
IGNORE_INDEX = -100

# Random-position control
CONTROL_BOOST = 5.0
CONTROL_K = (0, 10, 25, 50)
CONTROL_RANDOM_SEEDS = (0, 1, 2)

# Conditions of the ladder
CONDITIONS = ("C1", "C2", "C3", "C4", "C5")

# Three-stage schedule: warm-up / full block / end-to-end
STAGE_FRACTIONS = (0.1, 0.3, 0.6)

# Optimizer, scaled down for the toy
PEAK_LR = 1e-3
ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01
WARMUP_FRACTION = 0.01
COSINE_FLOOR = 0.1

# Initialization of fresh mixer parameters
INIT_STD = 0.02
INIT_DECAY = 0.9
CONV_WIDTH = 4

# Teacher training
COMPETENCE_GATE = 0.95
COMPETENCE_SAMPLES = 512
TEACHER_LR = 3e-3
TEACHER_MAX_STEPS = 4000
TEACHER_EVAL_EVERY = 250

# Statistics
BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_ALPHA = 0.05
TAIL_QUANTILE = 0.75
PREDICTORS = ("density", "token_type", "layer_depth", "teacher_attention")

# Full-scale magnitudes printed next to the toy measurements, never asserted:
# (bottom, top) decile means of drift and masking importance, and the
# (overall, tail) density/gradient Spearman
REFERENCE_DRIFT_DECILES = (0.078, 0.281)
REFERENCE_MASK_DECILES = (0.041, 0.143)
REFERENCE_SPEARMAN = (0.63, 0.71)

# Reports
REPORT_SCHEMA_VERSION = 1
TIMESTAMP_FIELDS = ("started_at", "finished_at")
