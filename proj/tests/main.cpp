#include <gtest/gtest.h>

#include "decloud/runtime.hpp"

int main(int argc, char** argv) {
  decloud::tune_allocator();
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
