import sys

from manage import main as manage


def main():
    """Shortcut for `manage.py faster ...`."""
    manage([sys.argv[0], "faster", *sys.argv[1:]])


if __name__ == "__main__":
    main()
