# Tests for discolift
