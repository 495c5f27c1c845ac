"""Every numeric default used by the package, in one place.

Modules import from here instead of hard-coding literals so the CLI, the
tests and the library agree on the same values.
"""

# nonvoid embedding
EPSILON = 1e-5
NORM_ORDER = 2
TAU_SOFT = 1.0
LAMBDA_NV = 0.01
EMBED_KERNEL = 2
EMBED_STRIDE = 2

# background constant
HISTOGRAM_BINS = 512

# phantoms
PHANTOM_MARGIN = 0.1
PHANTOM_INTENSITY = (0.5, 1.5)
PHANTOM_FRACTION_TOLERANCE = 0.02

# partition / attention
WINDOW_SIZE = 4
HEADS = 4
MLP_RATIO = 2
LAYER_NORM_EPS = 1e-5
PE_BASE = 10000.0
MASK_LOGIT = -1e30

# network (toy architecture)
STAGES = 2
CHANNELS = (12, 24)
WINDOWS = (4, 4)
TAU_CAP = 16
POOL_STRIDE = 2
CLASSES = 2
CONV_LEVELS = 1
GCA_UP_RADIUS = 0
SEED = 0

# losses and training
DICE_SMOOTH = 1e-5
LEARNING_RATE = 0.2
TRAIN_STEPS = 50
DIVERGENCE_LIMIT = 1e6

# gradient checking
FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
FD_FLOOR = 1e-8
E2E_TOLERANCE = 1e-3
# the deep composition has parameters with gradients near 1e-8, where
# round-off at h=1e-5 (about 1e-11 absolute) exceeds 1e-3 relative
E2E_FD_STEP = 1e-4

# metrics
NSD_TOLERANCE = 1.0
HD_PERCENTILE = 95.0
SIGNIFICANCE = 0.05
WILCOXON_EXACT_MAX_N = 12
WILCOXON_MIN_N = 5
