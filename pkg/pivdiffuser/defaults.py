"""Default values for analytic flows and dataset layout."""

from .fields import CaseLabel

# Parameters of each analytic flow kind as (default, description). Lengths
# and displacements are in pixels; a center of None means the image center.
FLOW_PARAMETERS = {
    'uniform': {
        'u0': (3.0, 'horizontal displacement'),
        'v0': (0.0, 'vertical displacement'),
    },
    'rotation': {
        'omega': (0.02, 'rotation per frame in radians'),
        'center_x': (None, 'rotation center column'),
        'center_y': (None, 'rotation center row'),
    },
    'shear': {
        'rate': (0.02, 'du/dy per frame'),
        'center_y': (None, 'row of zero displacement'),
    },
    'lamb_oseen_vortex': {
        'circulation': (200.0, 'circulation of the vortex in px^2/frame'),
        'core_radius': (12.0, 'vortex core radius'),
        'center_x': (None, 'vortex center column'),
        'center_y': (None, 'vortex center row'),
    },
    'cellular': {
        'amplitude': (2.0, 'peak displacement'),
        'wavelength': (64.0, 'cell wavelength'),
    },
}

FLOW_KINDS = tuple(FLOW_PARAMETERS.keys())

# Case directory names mapped to case labels; matching ignores case
CASE_DIRECTORIES = {
    'backstep': CaseLabel.BACKSTEP,
    'jhtdb': CaseLabel.JHTDB,
    'dns-turbulence': CaseLabel.DNS_TURBULENCE,
    'dns_turbulence': CaseLabel.DNS_TURBULENCE,
    'cylinder': CaseLabel.CYLINDER,
    'sqg': CaseLabel.SQG,
    'uniform': CaseLabel.UNIFORM,
    'unlabeled': CaseLabel.UNLABELED,
    'other': CaseLabel.OTHER,
}

# Dataset file name pattern: <case>/<name><suffix><extension>
IMAGE1_SUFFIX = '_img1'
IMAGE2_SUFFIX = '_img2'
FLOW_SUFFIX = '_flow'
IMAGE_EXTENSIONS = ('.png', '.tif', '.tiff')

MANIFEST_FILENAME = 'manifest.txt'
CONFIG_FILENAME = 'config.toml'
REPORT_TABLE_FILENAME = 'report.txt'
REPORT_RECORDS_FILENAME = 'report.tsv'
TIMING_FILENAME = 'timing.tsv'
TRAIN_LOG_FILENAME = 'train_log.tsv'
