import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // the end-to-end test trains a real model on a CPU
    testTimeout: 300_000,
    hookTimeout: 120_000,
  },
});
