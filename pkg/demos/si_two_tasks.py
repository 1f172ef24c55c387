"""Synaptic Intelligence on two conflicting quadratic tasks.

Task A pulls both parameters toward +1, task B pulls only the first one
toward -1.  Plain gradient descent on B forgets A completely in the
contested coordinate; with the SI penalty the parameter stays closer to
where A left it, and the free coordinate is untouched either way.

    python demos/si_two_tasks.py
"""
import numpy as np

from ringfed.si import SIState, StepRecord, si_accumulate, si_consolidate, si_penalty


def descend(theta, grad_fn, si, steps=400, lr=0.05, use_penalty=True):
    for _ in range(steps):
        g = grad_fn(theta)
        pen = si_penalty(theta, si)[1] if use_penalty else 0.0
        delta = -lr * (g + pen)
        theta = theta + delta
        si_accumulate(si, StepRecord(g, delta))  # path integral sees the task gradient only
    return theta


def main():
    task_a = lambda t: t - 1.0
    task_b = lambda t: np.array([t[0] + 1.0, 0.0])

    for c in (0.0, 0.1, 1.0, 10.0):
        si = SIState.fresh(np.zeros(2), c=c)
        theta = descend(np.zeros(2), task_a, si)
        si_consolidate(si, theta)
        after_b = descend(theta, task_b, si)
        print(f"c={c:<5} omega={np.round(si.omega, 2)}  after A {np.round(theta, 3)}"
              f"  after B {np.round(after_b, 3)}")


if __name__ == "__main__":
    main()
