"""
Latent Concept Transfer Lab Configuration
"""
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


class Config:
    # Base Directories
    BASE_DIR = Path(__file__).parent
    CONFIG_DIR = BASE_DIR / 'configs'
    OUTPUT_DIR = BASE_DIR / 'output'
    LOGS_DIR = BASE_DIR / 'logs'

    # Create directories if they don't exist
    for directory in [OUTPUT_DIR, LOGS_DIR]:
        directory.mkdir(exist_ok=True)

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_ROTATION = os.getenv('LOG_ROTATION', '50 MB')
    LOG_RETENTION = os.getenv('LOG_RETENTION', '10 days')

    # EM Estimation
    EM_MAX_ITERS = int(os.getenv('EM_MAX_ITERS', 500))
    EM_TOL = float(os.getenv('EM_TOL', 1e-8))  # relative loglik improvement
    EM_RESTARTS = int(os.getenv('EM_RESTARTS', 10))
    EM_RIDGE = float(os.getenv('EM_RIDGE', 1e-8))
    EM_MIN_SIGMA = float(os.getenv('EM_MIN_SIGMA', 1e-10))
    EM_EMPTY_FRACTION = 1e-6  # component mass below this * n aborts a restart
    EM_MONOTONE_SLACK = 1e-9  # allowed loglik drop per record

    # Identification
    ASSIGN_MIN_WEIGHT = float(os.getenv('ASSIGN_MIN_WEIGHT', 0.05))  # lighter target components are matched last

    # Quadrature / Monte Carlo
    QUAD_EPSABS = float(os.getenv('QUAD_EPSABS', 1e-12))
    QUAD_EPSREL = float(os.getenv('QUAD_EPSREL', 1e-10))
    QUAD_HALF_WIDTH = float(os.getenv('QUAD_HALF_WIDTH', 12.0))  # in noise sd units
    GH_ORDER = int(os.getenv('GH_ORDER', 120))  # label-axis Gauss-Hermite nodes
    COVARIATE_QUAD_ORDER = int(os.getenv('COVARIATE_QUAD_ORDER', 80))
    COVARIATE_MC_POINTS = int(os.getenv('COVARIATE_MC_POINTS', 200000))
    ICL_MC_DRAWS = int(os.getenv('ICL_MC_DRAWS', 2000))
    ICL_BATCHES = 20
    L2Q_MC_POINTS = int(os.getenv('L2Q_MC_POINTS', 20000))
    ROW_SUM_TOL = 1e-8

    # HMM Lab
    ENUMERATION_LIMIT = int(os.getenv('ENUMERATION_LIMIT', 10**6))
    RANK_RTOL = 1e-10

    # Experiment Harness
    JOBS = int(os.getenv('JOBS', 1))
    CSV_SCHEMA_VERSION = 1
    MAX_PERMUTATION_K = 8
    ERROR_GRID_POINTS = 100
