"""Full 7 x 7 effect grid; writes metrics and plot-ready figure data."""

from _study import main

if __name__ == "__main__":
    main("reference-full", __doc__)
