import sys

from adaptive_decoding.harness import main

sys.exit(main())
