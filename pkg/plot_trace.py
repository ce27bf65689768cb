import argparse
import os
import sys
import numpy as np
import matplotlib.pylab as plt


def plot_trace(trace, ylimit=None, path=None):
    """ Plot the outputs and inputs of a closed-loop trace vs. time step """
    names = trace.dtype.names
    outputs = [n for n in names if n.startswith('y')]
    inputs = [n for n in names if n.startswith('u')]
    fig, (ax_y, ax_u) = plt.subplots(2, 1, sharex=True)
    for name in outputs:
        ax_y.plot(trace['t'], trace[name], label=name)
    if ylimit is not None:
        ax_y.axhline(ylimit, color='k', linestyle='--')
        ax_y.axhline(-ylimit, color='k', linestyle='--')
    ax_y.set_ylabel('Output')
    ax_y.legend()
    for name in inputs:
        ax_u.step(trace['t'], trace[name], where='post', label=name)
    ax_u.set_ylabel('Input')
    ax_u.set_xlabel('Step')
    ax_u.legend()
    ax_y.set_title('Closed-loop trajectory')
    if path:
        fig.savefig(path)
    else:
        plt.show()


if __name__ == "__main__":
    # Parse command line arguments
    parser = argparse.ArgumentParser(description="Plot a closed-loop trace.")
    parser.add_argument("-p", "--path", type=str, required=True, help="trace.csv written by 'simulate'")
    parser.add_argument("--ylimit", type=float, default=None, help="draw +-YLIMIT output limits")
    parser.add_argument("--save", type=str, default=None, help="write the figure here instead of showing it")
    args = parser.parse_args()

    if not os.path.isfile(args.path):
        print("Cannot load trace: file does not exist. Quitting.")
        sys.exit(0)
    trace = np.genfromtxt(args.path, delimiter=',', names=True, dtype=None, encoding=None)

    plot_trace(trace, ylimit=args.ylimit, path=args.save)
