"""Default constants, registries, experiment parameters, and output file names."""

from pathlib import Path

# ---------------------------------------------------------------------------
# Logger and output files
# ---------------------------------------------------------------------------
LOGGER_NAME = "implicitfilter"
DEFAULT_OUTPUT_DIR = Path("ipf_output")
LOG_FILE_NAME = "ipf.log"
MANIFEST_FILE_NAME = "manifest.json"

# ---------------------------------------------------------------------------
# Registries (names accepted in config files)
# ---------------------------------------------------------------------------
DRIFT_REGISTRY: tuple[str, ...] = ("double_well", "zero", "custom_polynomial")
OBSERVATION_REGISTRY: tuple[str, ...] = ("linear", "cubic")
PROPOSALS: tuple[str, ...] = ("implicit_a", "implicit_b", "implicit_auto", "standard_sir")

# ---------------------------------------------------------------------------
# Double-well example (table1, figure_data)
# ---------------------------------------------------------------------------
DOUBLE_WELL_SIGMA = 0.1
DOUBLE_WELL_OBS_NOISE = 0.025
DOUBLE_WELL_TIME_STEP = 0.01
DOUBLE_WELL_STEPS = 100
DOUBLE_WELL_BARRIER = 2.5
DOUBLE_WELL_CENTER_SQ = 0.5
TABLE1_PARTICLES: tuple[int, ...] = (100, 50, 20, 10, 5, 1)

# ---------------------------------------------------------------------------
# Static problems (table2-table5, figure_data)
# ---------------------------------------------------------------------------
STATIC_SIGMA = 0.1
STATIC_OBS_NOISE = 0.1
TABLE2_B = 2.0
TABLE4_B = 1.5
FIGURE3_B = 1.0
TABLE3_B_VALUES: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
TABLE5_B_VALUES: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5)
HISTOGRAM_BINS = 10
HISTOGRAM_SAMPLES = 10_000
TABLE3_PARTICLES = 30
TABLE3_REPEATS = 100
TABLE5_PARTICLES = 1000
TABLE5_REPEATS = 10
TABLE1_REPEATS = 10_000
FAST_REPEATS = 1000

# ---------------------------------------------------------------------------
# Parameter identification (table6)
# ---------------------------------------------------------------------------
RM_SIGMA_STAR = 1e-2
RM_OBS_NOISE = 1e-4
RM_TIME_STEP = 0.01
RM_STEPS = 100
RM_PARTICLES = 50
RM_SCALE_C = 4.0
RM_ALPHA_1 = 1.0
RM_ITERATIONS = 13
RM_INITIAL_RATIO = 10.0
RM_STOP_RELATIVE_CHANGE = 1e-3
RM_STOP_CONSECUTIVE = 3
RM_PROJECTION_FLOOR = 1e-3
RM_LOWER_BOUND = 1e-6
RM_UPPER_BOUND = 1e3
RM_UPDATE_RULES = ("additive", "log")

# ---------------------------------------------------------------------------
# Solver settings
# ---------------------------------------------------------------------------
RESIDUAL_TOL_1D = 1e-10
RESIDUAL_TOL_MULTI = 1e-8
GRADIENT_TOL = 1e-8
MAX_SOLVER_ITER = 50
MIN_SCAN_HALF_WIDTH = 5.0
MIN_SCAN_POINTS = 4001
SUBSTITUTE_HALF_WIDTH = 5.0
SUBSTITUTE_POINTS = 10_000
SUBSTITUTE_BARRIER_MARGIN = 0.1
FD_STEP = 1e-5
WEIGHT_COLLAPSE_LEVEL = 1.0 - 1e-9

# ---------------------------------------------------------------------------
# Quadrature oracle
# ---------------------------------------------------------------------------
QUADRATURE_POINTS = 100_000
QUADRATURE_PILOT_HALF_WIDTH = 6.0
QUADRATURE_PILOT_POINTS = 20_001
QUADRATURE_SUPPORT_LEVEL = 1e-14
TAIL_DENSITY_LEVEL = 1e-12

# ---------------------------------------------------------------------------
# Random stream tags
# ---------------------------------------------------------------------------
STREAM_PROPOSAL = 0
STREAM_RESAMPLE = 1
STREAM_BACKWARD = 2
STREAM_DATA = 3
STREAM_BASELINE = 4

# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------
THREADS_ENV_VAR = "IPF_THREADS"
