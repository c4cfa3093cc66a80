# This file is part of lfad, long-form attention decoding on a desk-scale speech model.
#
# Copyright 2024 The lfad Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================
"""The command line interface of lfad (``python -m lfad``)."""

import sys

from lfad.cli import main


if __name__ == '__main__':
    sys.exit(main())
