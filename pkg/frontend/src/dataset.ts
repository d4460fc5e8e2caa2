/** Image-folder dataset discovery: <root>/<split>/<class>/*.ppm. */

import { readdirSync, statSync } from "node:fs";
import { join } from "node:path";

export interface DatasetImage {
  path: string;
  classIndex: number;
}

export interface FolderDataset {
  classNames: string[];
  splits: Record<string, DatasetImage[]>;
}

function listDirs(root: string): string[] {
  return readdirSync(root)
    .filter((name) => statSync(join(root, name)).isDirectory())
    .sort();
}

export function scanDataset(root: string, onlySplits?: string[]): FolderDataset {
  const splitNames = listDirs(root).filter((s) => !onlySplits || onlySplits.includes(s));
  if (splitNames.length === 0) {
    throw new Error(`no split directories found under ${root}`);
  }
  const classSet = new Set<string>();
  for (const split of splitNames) {
    for (const cls of listDirs(join(root, split))) classSet.add(cls);
  }
  const classNames = [...classSet].sort();
  const classIndex = new Map(classNames.map((c, i) => [c, i]));
  const splits: Record<string, DatasetImage[]> = {};
  for (const split of splitNames) {
    const images: DatasetImage[] = [];
    for (const cls of listDirs(join(root, split))) {
      const dir = join(root, split, cls);
      for (const file of readdirSync(dir).sort()) {
        if (file.toLowerCase().endsWith(".ppm")) {
          images.push({ path: join(dir, file), classIndex: classIndex.get(cls)! });
        }
      }
    }
    if (images.length === 0) throw new Error(`split ${split} contains no .ppm images`);
    splits[split] = images;
  }
  return { classNames, splits };
}
