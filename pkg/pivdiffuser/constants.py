"""Constants."""

# Middlebury flow file
FLO_MAGIC = 202021.25
FLO_HEADER_BYTES = 12

# Flow values above this magnitude mark unknown flow
INVALID_FLOW_THRESHOLD = 1e9

# Bit depth maxima used to normalize intensities to [0, 1]
BIT_DEPTH_MAX = {
    8: 255,
    16: 65535,
}

# Smallest interrogable image side
MIN_IMAGE_SIDE = 16

# Encoder output stride
FEATURE_STRIDE = 8

# Supported coordinate scales of a velocity field
COORDINATE_SCALES = (1.0, 2.0)

SPLITS = ('train', 'val', 'test')
