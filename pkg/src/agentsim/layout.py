"""Word layout of agent and behavior records.

Every field is one 8-byte word (int64 or float64).  Kernels read fields with
``load_f64(addr + 8 * POS_X)`` and friends.
"""

WORD = 8

# agent record
UID = 0
POS = 1  # x, y, z
DIAM = 4
NEW_DIAM = 5  # diameter written by behaviors, applied after the agent loop
FORCE = 6  # last_force x, y, z
DISP = 9  # pending displacement x, y, z
FLAGS = 12
NONZERO = 13  # non-zero neighbor forces counted in the last force evaluation
TYPE = 14
THRESH = 15  # force threshold
RNG = 16  # per-agent random stream counter
NBEH = 17
BEH = 18  # behavior record addresses
MAX_BEHAVIORS = 4
ATTR = 22  # two free model attributes
LAST_DISP = 24  # displacement applied by the last integration step
AGENT_WORDS = 28
AGENT_BYTES = AGENT_WORDS * WORD

# behavior record
B_KIND = 0
B_FLAGS = 1
B_P0 = 2
B_P1 = 3
BEHAVIOR_WORDS = 4
BEHAVIOR_BYTES = BEHAVIOR_WORDS * WORD

B_COPY_TO_DAUGHTER = 1

# agent flag bits
STATIC = 1
WAS_STATIC = 2
MOVED = 4
GREW = 8
NEW = 16
NEW_NEIGHBOR = 32
SELF_CHANGED = 64
REMOVED = 128
# MOVED/GREW was set outside the agent loop; integration keeps it for the next propagation
EXTERNAL = 256

TRANSIENT = MOVED | GREW | NEW | NEW_NEIGHBOR | SELF_CHANGED

# flags that invalidate the staticness of neighbors
NEIGHBOR_DIRTY = MOVED | GREW | NEW

# built-in behavior kinds with numba kernels; python behaviors get ids >= PY_KIND_BASE
KIND_GROW_DIVIDE = 1
KIND_CLUSTER = 2
KIND_RANDOM_WALK = 3
PY_KIND_BASE = 1000

# float kernel parameters
FP_DT = 0
FP_K = 1  # repulsion coefficient
FP_MAXD = 2  # max displacement per step
FP_RADIUS = 3  # interaction radius of this iteration
FP_THRESH = 4  # global force threshold
FP_WORDS = 8

# int kernel parameters
IP_SEED = 0
IP_DETECT = 1
IP_MM_KIND = 2
IP_ITER = 3
IP_RUN_BEH = 4
IP_RUN_MECH = 5
IP_WORDS = 8

# per-thread counters
C_FORCE_EVALS = 0
C_STATIC_SKIPS = 1
C_ADD_N = 2
C_REM_N = 3
C_BEH_RUNS = 4
C_MECH_RUNS = 5
C_WORDS = 8
