"""Benchmark pipeline for the replanning stack.

Steps:
  1. run      - one scenario file: init_plan + step loop, trajectory file,
                event log, run statistics
  2. compare  - Monte-Carlo optimality study on small 2-D grids: exact
                span-search oracle vs RBK vs position-only A*
  3. export   - re-sample a saved trajectory and write a plot script

Environment (read through python-dotenv by the CLI):
  BENCH_OUT_DIR    output root                (default data/bench)
  BENCH_WORKERS    parallel Monte-Carlo trials (default 1)
  BENCH_LOG_LEVEL  logging level              (default WARNING)
"""

DEFAULT_OUT_DIR = "data/bench"
DEFAULT_WORKERS = 1
DEFAULT_LOG_LEVEL = "WARNING"

SCENARIO_VERSION = 1
SAMPLE_STEP = 0.05          # seconds between exported trajectory rows

# acceptance bounds for trajectory checks
MAX_AXIS_VELOCITY = 2.0
MAX_AXIS_ACCELERATION = 3.0
