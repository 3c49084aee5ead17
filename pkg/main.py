import sys

from fedmesh.cli import main

if __name__ == "__main__":
    # 0 ok, 1 usage, 2 run failure, 3 timeout
    sys.exit(main())
