import math


def restart_cycle(step, t0, mult):
    """Return (t_cur, T_i): steps into the current cycle and its length."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if t0 < 1 or mult < 1:
        raise ValueError("need t0 >= 1 and mult >= 1")
    if mult == 1:
        return step % t0, t0
    period = t0
    while step >= period:
        step -= period
        period = period * mult
    return step, period


def cosine_restarts(step, lr_max, lr_min, t0, mult=2.0):
    """Cosine decay from lr_max to lr_min, restarting after t0, t0*mult, ... steps."""
    t_cur, period = restart_cycle(step, t0, mult)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_cur / period))
