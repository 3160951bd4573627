import os

# vsc-install derives the repository root from sys.argv[0], which is the
# pytest executable when running under pytest; point it at this directory.
os.environ.setdefault('REPO_BASE_DIR', os.path.dirname(os.path.abspath(__file__)))
