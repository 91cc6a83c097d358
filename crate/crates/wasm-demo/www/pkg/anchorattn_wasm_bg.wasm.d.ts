/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_jsflopcurves_free: (a: number, b: number) => void;
export const __wbg_jsmaps_free: (a: number, b: number) => void;
export const __wbg_jstrajectory_free: (a: number, b: number) => void;
export const attentionMaps: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const fitTrajectory: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const flopCurves: (a: number, b: number, c: number, d: number) => number;
export const jsflopcurves_anchor: (a: number) => [number, number];
export const jsflopcurves_crossover: (a: number) => number;
export const jsflopcurves_ns: (a: number) => [number, number];
export const jsflopcurves_vanilla: (a: number) => [number, number];
export const jsmaps_anchor: (a: number) => [number, number];
export const jsmaps_anchors: (a: number) => [number, number];
export const jsmaps_maxGap: (a: number) => number;
export const jsmaps_n: (a: number) => number;
export const jsmaps_vanilla: (a: number) => [number, number];
export const jstrajectory_objective: (a: number) => [number, number];
export const jstrajectory_positions: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
