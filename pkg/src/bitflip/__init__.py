"""Bit-flip weight attacks on quantized feedforward networks via lp-Box ADMM."""
