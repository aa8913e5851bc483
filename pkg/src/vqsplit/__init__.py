"""Codebook-based token compression for edge-cloud split image classification.

Images are vector-quantized into discrete codebook indices on the edge, a
scored top-K subset is bit-packed together with a position mask, and a
masked-token-pretrained transformer classifies from the sparse indices on
the cloud.
"""

__version__ = "0.1.0"
