import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    // The e2e file boots the segmentation service (and trains a small model
    // on first run), so hooks get a generous budget.
    testTimeout: 60_000,
    hookTimeout: 600_000,
    // One process: the e2e suite owns a single local service instance.
    fileParallelism: false,
  },
});
