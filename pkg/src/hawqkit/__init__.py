"""Hessian-aware mixed-precision quantization toolkit."""
