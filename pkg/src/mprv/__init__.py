"""Mixed-precision packed-MAC RISC-V toolkit.

Instruction-level models of a packed multiply-accumulate ISA extension,
a cycle-approximate simulator, quantized-DNN kernel generators, a greedy
mixed-precision design-space explorer, and an analytic voltage-scaling
power model.
"""

__version__ = "0.1.0"
