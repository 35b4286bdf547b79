"""Command-line runner."""
from mfdelay.cli import main

if __name__ == '__main__':
    main()
