import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

/** Deterministic little P6 dataset: two visually distinct classes. */
export function writeToyDataset(root: string, perClass = 2, splits = ["train"]): void {
  const w = 48;
  const h = 40;
  for (const split of splits) {
    for (const [cIdx, cname] of ["checker", "stripe"].entries()) {
      const dir = join(root, split, cname);
      mkdirSync(dir, { recursive: true });
      for (let i = 0; i < perClass; i++) {
        const pix = Buffer.alloc(w * h * 3);
        for (let y = 0; y < h; y++) {
          for (let x = 0; x < w; x++) {
            const o = (y * w + x) * 3;
            if (cIdx === 0) {
              const on = (Math.floor(x / 6) + Math.floor(y / 6)) % 2 === 0;
              pix[o] = on ? 230 : 20;
              pix[o + 1] = 60 + i * 30;
              pix[o + 2] = on ? 40 : 200;
            } else {
              pix[o] = (x * 5 + i * 17) % 256;
              pix[o + 1] = (y * 7) % 256;
              pix[o + 2] = 130;
            }
          }
        }
        const header = Buffer.from(`P6\n${w} ${h}\n255\n`, "ascii");
        writeFileSync(join(dir, `img_${i}.ppm`), Buffer.concat([header, pix]));
      }
    }
  }
}
