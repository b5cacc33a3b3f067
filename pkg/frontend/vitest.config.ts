import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["test/**/*.test.ts"],
    // loopback.test.ts spawns the render service, which preprocesses a
    // cloud before it starts listening
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
