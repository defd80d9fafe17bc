# generic-zero check for model-implied instruments
MIIV_DRAWS = 20
MIIV_TOLERANCE = 1e-10
MIIV_SEED = 20_190_101
COEFFICIENT_RANGE = (0.2, 0.9)
VARIANCE_RANGE = (0.5, 1.5)

# least squares
RANK_TOLERANCE = 1e-10

# bayesian model averaging
SUBSET_CAP = 100_000
LOG_BF_CAP = 700.0
WEAK_THRESHOLD = 0.5

ALPHA = 0.05
INTERCEPT = "(intercept)"

# population used by both simulation designs, total indicator variance 1
FACTOR_VARIANCE = 0.36
ERROR_VARIANCE = 0.64
TARGET_OUTCOME = "y2"
TARGET_LOADING = 1.0
MAX_FAILURE_RATE = 0.01

INDICATORS = ["y1", "y2", "y3", "y4", "y5", "y6", "y7", "y8"]

# error covariance that each design adds to the population and the true model
OMITTED_COVARIANCE = {
    "sim1": ("y2", "y3"),
    "sim2": ("y2", "y5"),
}

CFA_MODEL = """\
eta1 =~ y1 + y2 + y3 + y4
eta2 =~ y5 + y6 + y7 + y8
eta1 ~~ eta2
"""
