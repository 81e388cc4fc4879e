"""Entry point for python -m probadapt"""
from .cli import main

if __name__ == '__main__':
    main()
