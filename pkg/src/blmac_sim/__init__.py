"""blmac-sim.

A bit-exact software model of a MAC-less CNN inference processor: streaming
slice-buffer convolution, bit-layer signed-digit accumulation and arithmetic-coded
sparse weight streams, with the offline compression toolchain and a cycle and
bandwidth model.
"""

__version__ = "0.4.0"
