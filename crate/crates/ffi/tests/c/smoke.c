#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "cmrsam.h"

#define CHECK(cond)                                               \
    do {                                                          \
        if (!(cond)) {                                            \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                             \
        }                                                         \
    } while (0)

int main(int argc, char **argv) {
    CHECK(argc == 2);
    CHECK(strlen(cmr_version()) > 0);

    CmrModel *model = NULL;
    CHECK(cmr_model_load("/nonexistent/model.ckpt", &model) == CMR_STATUS_IO);
    CHECK(model == NULL);
    char msg[256];
    CHECK(cmr_last_error(msg, sizeof msg) > 0);
    CHECK(strstr(msg, "/nonexistent/model.ckpt") != NULL);

    CHECK(cmr_model_load(argv[1], &model) == CMR_STATUS_OK);
    CmrClip *clip = NULL;
    CHECK(cmr_clip_phantom(CMR_VIEW_SAX, CMR_SLICE_MID, 16, 16, 4, 7, &clip) == CMR_STATUS_OK);
    size_t h, w, t;
    CHECK(cmr_clip_dims(clip, &h, &w, &t) == CMR_STATUS_OK);
    CHECK(h == 16 && w == 16 && t == 4);

    CmrMask *pred = NULL;
    CHECK(cmr_segment(model, clip, CMR_VIEW_AUTO, &pred) == CMR_STATUS_OK);
    size_t n = 0;
    CHECK(cmr_mask_len(pred, &n) == CMR_STATUS_OK);
    CHECK(n == h * w * t);
    unsigned char *labels = malloc(n);
    unsigned char *truth = malloc(n);
    CHECK(cmr_mask_copy(pred, labels, n - 1) == CMR_STATUS_BUFFER_TOO_SMALL);
    CHECK(cmr_mask_copy(pred, labels, n) == CMR_STATUS_OK);
    for (size_t i = 0; i < n; i++) CHECK(labels[i] <= 1);

    CHECK(cmr_clip_mask(clip, truth, n) == CMR_STATUS_OK);
    double dice = -1.0, hd = -1.0;
    CHECK(cmr_dice(truth, truth, n, &dice) == CMR_STATUS_OK);
    CHECK(dice == 1.0);
    /* voxels are stored (row, col, phase); take phase 0 */
    unsigned char *frame = malloc(h * w);
    for (size_t i = 0; i < h * w; i++) frame[i] = truth[i * t];
    CHECK(cmr_hausdorff(frame, frame, h, w, &hd) == CMR_STATUS_OK);
    CHECK(hd == 0.0);
    free(frame);

    free(labels);
    free(truth);
    cmr_mask_free(pred);
    cmr_clip_free(clip);
    cmr_model_free(model);
    cmr_model_free(NULL);
    puts("ok");
    return 0;
}
