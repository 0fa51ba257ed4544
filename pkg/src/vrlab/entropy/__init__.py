from .coder import (BACKEND, Bitstream, CoderError, StreamError, cdf_tables, kernels, range_decode,
                    range_encode)
from .densities import (P_MIN, SIGMA_MIN, FactorizedModel, GaussianCond, bin_probability, estimated_bits,
                        rate_bits)

__all__ = [
    "BACKEND", "Bitstream", "CoderError", "StreamError", "cdf_tables", "kernels", "range_decode",
    "range_encode", "P_MIN", "SIGMA_MIN", "FactorizedModel", "GaussianCond", "bin_probability",
    "estimated_bits", "rate_bits",
]
