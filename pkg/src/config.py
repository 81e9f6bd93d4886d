import math
import os

# Get the project root directory (parent of src)
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# Runtime Configuration
RUNTIME_CONFIG = {
    'threads': int(os.environ.get('SUBDYN_THREADS', '1')),  # Caps BLAS / worker parallelism
    'default_seed': 0,
    'version': '0.1.0',
}

# Logging Configuration
LOGGING_CONFIG = {
    'logs_directory': os.path.join(PROJECT_ROOT, 'data', 'logs'),
    'log_file': 'subdyn.log',
    'log_level': 'INFO',        # DEBUG, INFO, WARNING, ERROR
    'console_level': 'WARNING', # Mirrored to stderr
}

# Full-space Newton Solver Configuration
SOLVER_CONFIG = {
    'max_newton_iters': 50,
    'grad_tol': 1e-6,              # Scaled by total mass * |g| / N
    'armijo_c': 1e-4,
    'backtrack_factor': 0.5,
    'max_halvings': 20,
    'linear_solver': 'cholesky',   # 'cholesky' or 'pcg'
    'pcg_tol': 1e-10,
    'pcg_max_iter_factor': 10,     # max iterations = factor * n
    'pd_eps_rel': 1e-8,            # eps = rel * max(1, ||A||_inf)
    'strict_line_search': False,   # raise LineSearchFailure instead of flagging it
}

# Material presets, numeric values kept as given in the scenario unit system
MATERIAL_PRESETS = {
    'hair': {
        'youngs_modulus': 4e7,
        'poisson_ratio': 0.3,
        'density': 1320.0,         # 1.32 g/cm^3
        'rod_radius': 7e-4,        # 0.7 mm
        'gravity': (0.0, -9.81, 0.0),
    },
    'cloth': {
        'youngs_modulus': 1e6,
        'poisson_ratio': 0.45,
        'density': 1.5e3,
        'shell_thickness': 3e-3,   # 0.3 cm
        'gravity': (0.0, -9.81, 0.0),
    },
    'solid': {
        'youngs_modulus': 1e7,
        'poisson_ratio': 0.48,
        'density': 1.0,
        'gravity': (0.0, -9.81, 0.0),
    },
    'beam': {
        'youngs_modulus': 1e6,
        'poisson_ratio': 0.3,
        'density': 1000.0,
        'gravity': (0.0, -9.81, 0.0),
    },
    'ears': {
        'youngs_modulus': 5e4,
        'poisson_ratio': 0.45,
        'density': 1000.0,
        'gravity': (0.0, -9.81, 0.0),
    },
}

# Procedural desk-scale meshes
MESH_CONFIG = {
    'rod_strands': 10,
    'rod_vertices_per_strand': 20,
    'rod_segment_length': 0.01,     # m
    'rod_strand_spacing': 0.02,     # m
    'cloth_resolution': (8, 8),     # vertices; (16, 12) mirrors the 576-DoF cloth
    'cloth_size': (0.4, 0.4),       # m
    'beam_cells': (12, 4, 4),       # x (length), y, z
    'beam_cell_size': 0.05,         # m
    'lobe_cell_size': 0.05,
    'ear_cells': (2, 6, 2),         # per ear
    'ear_cell_size': 0.02,
}

# Scenario scripts (speed / angular units are configuration values)
SCENARIO_CONFIG = {
    'dt': 1.0 / 30.0,
    'speed_unit': 0.01,             # m/s per scripted speed unit
    'angular_speed_unit': math.pi / 180.0,  # scripted angular speeds are in degrees per second
    'rod_translation_speeds': [10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120],
    'rod_translation_period': 10,   # frames between direction flips
    'rod_rotation_speeds': [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4],
    'rod_frames': 100,
    'cloth_frames': 200,
    'cloth_speed_profile': [0.3, 0.8, 0.1, 1.2, 0.5, 0.0, 0.9, 0.2],   # m/s per segment
    'cloth_segment_frames': 25,
    'beam_frames': 300,
    'beam_train_frames': 100,
    'solid_frames': 150,
    'solid_amplitude': 0.15,
    'solid_period_frames': 60,
    'solid_chirp': 0.6,
    'ears_frames': 150,
    'ears_amplitude': 0.08,
    'ears_period_frames': 40,
    'ears_chirp': 0.8,
    'cloth_train_fraction': 0.5,
    'solid_train_fraction': 0.6,
    'bc_penalty_weight': 1e5,
}

# Autoencoder Configuration (per scenario family)
AUTOENCODER_CONFIG = {
    'pca_dim': 50,
    'epochs': 20000,
    'batch_size': 500,
    'learning_rate': 1e-4,
    'bn_momentum': 0.9,
    'bn_eps': 1e-5,
    'latent_dim': {
        'rod-translation': 4,
        'rod-rotation': 4,
        'cloth-pinned': 4,
        'beam-cantilever': 4,
        'solid-swing': 12,
        'bunny-ears-like': 8,
    },
    'hidden': {
        'rod-translation': [256, 256, 256],
        'rod-rotation': [512, 512, 512],
        'cloth-pinned': [200, 200, 200],
        'beam-cantilever': [200, 200, 200],
        'solid-swing': [200, 200, 200],
        'bunny-ears-like': [200, 200, 200],
    },
}

# Latent Integrator Configuration
INTEGRATOR_CONFIG = {
    'epochs': 10000,
    'batch_size': 128,
    'learning_rate': 1e-4,
    'noise_scale': 0.1,             # fraction of the per-dimension batch std
    'balance_eps': 1e-6,            # m/s clamp for the balancing weight
    'bn_momentum': 0.9,
    'bn_eps': 1e-5,
    'hidden': {
        'rod-translation': [256, 256, 256],
        'rod-rotation': [512, 512, 512],
        'cloth-pinned': [32, 32],
        'beam-cantilever': [256, 256, 256, 256, 256],
        'solid-swing': [256, 256, 256, 256, 256],
        'bunny-ears-like': [256, 256, 256, 256, 256],
    },
}

# Shared training behaviour
TRAINING_CONFIG = {
    'show_progress': True,
    'log_every': 100,               # epochs between log lines
    'report_file': 'train_report.jsonl',
}

# Benchmark Configuration
BENCH_CONFIG = {
    'repeats': 100,
    'warmup_fraction': 0.1,
    'dtype': 'float32',
}

# Mesh sequence export
EXPORT_CONFIG = {
    'file_pattern': 'frame_{:05d}.obj',
    'float_format': '{:.9g}',
}
